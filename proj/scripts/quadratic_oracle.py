#!/usr/bin/env python3
"""Symbolic oracle for meta-gradients on L(theta) = 1/2 (theta - c)^2.

Unrolls `steps` inner updates theta <- theta - alpha * dL/dtheta with sympy,
then differentiates the post-adaptation loss with respect to theta and alpha.
The first-order variant replaces each inner gradient by a fresh symbol (a
stopped gradient) before differentiating, then substitutes its value back.

Writes tests/quadratic_oracle.inc, a C++ initializer list consumed by the
meta-gradient tests. Regenerate with:

    python3 scripts/quadratic_oracle.py > tests/quadratic_oracle.inc
"""

import sympy as sp

theta, alpha, c = sp.symbols("theta alpha c", real=True)


def loss(t):
    return sp.Rational(1, 2) * (t - c) ** 2


def unroll(steps, first_order):
    t = theta
    stops = []
    for k in range(steps):
        g = sp.diff(loss(sp.Symbol("u")), sp.Symbol("u")).subs(sp.Symbol("u"), t)
        if first_order:
            s = sp.Symbol(f"g{k}", real=True)
            stops.append((s, g))
            g = s
        t = t - alpha * g
    return t, stops


def resolve(expr, stops):
    # Substitute stopped gradients back, latest first (each may mention earlier ones).
    for s, g in reversed(stops):
        expr = expr.subs(s, g)
    for s, g in reversed(stops):
        expr = expr.subs(s, g)
    return sp.simplify(expr)


CASES = [
    # theta, c, alpha, steps
    (0.0, 1.0, 0.1, 1),
    (1.0, 0.0, 0.1, 1),
    (1.0, 0.0, -0.1, 1),
    (1.0, 0.0, 0.1, 5),
    (0.3, -0.7, 0.25, 2),
    (-1.2, 0.4, -0.05, 3),
    (2.0, 2.0, 0.3, 2),
    (0.5, 1.5, 0.0, 4),
]


def main():
    print("// Generated by scripts/quadratic_oracle.py; do not edit.")
    print("// theta, c, alpha, steps, adapted, adapted_loss,")
    print("// dtheta_full, dtheta_first, dalpha_full, dalpha_first")
    for th, cv, al, steps in CASES:
        subs = {theta: sp.Rational(str(th)), c: sp.Rational(str(cv)), alpha: sp.Rational(str(al))}
        adapted_full, _ = unroll(steps, False)
        outer_full = loss(adapted_full)
        adapted_fo, stops = unroll(steps, True)
        outer_fo = loss(adapted_fo)
        row = [
            adapted_full.subs(subs),
            outer_full.subs(subs),
            sp.diff(outer_full, theta).subs(subs),
            resolve(sp.diff(outer_fo, theta), stops).subs(subs),
            sp.diff(outer_full, alpha).subs(subs),
            resolve(sp.diff(outer_fo, alpha), stops).subs(subs),
        ]
        vals = ", ".join(f"{float(sp.N(v, 30)):.17e}" for v in row)
        print(f"{{{th!r}, {cv!r}, {al!r}, {steps}, {vals}}},")


if __name__ == "__main__":
    main()
