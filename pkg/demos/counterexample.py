"""Two annulus mixtures that are nearly identical in KL yet disagree on a third of the data.

Solves for the smallest dimension that admits the construction, checks the
closed-form KLs against Monte Carlo, then samples points and counts the ones
that admit a confident, low-distance label flip under ``q`` only.

    python3 demos/counterexample.py [eps] [delta] [Delta]
"""
import sys

from flowlab.oracle import kl_p_q, kl_q_p, mc_kl, solve_dimension, verify_proposition


def main(eps=0.1, delta=0.01, delta_r=0.3):
    sol = solve_dimension(eps, delta, delta_r)
    p = sol.params
    print(f"smallest dimension d={sol.dim}")
    print(f"lam1 interval ({sol.lam1_low:.4e}, {sol.lam1_high:.4e}), using lam1={p.lam1:.4e}")

    for name, exact, direction in (("KL(q||p)", kl_q_p(p), "q_p"), ("KL(p||q)", kl_p_q(p), "p_q")):
        est, se = mc_kl(p, direction, 200_000, 0)
        print(f"{name}: closed form {exact:.5f}, Monte Carlo {est:.5f} +/- {se:.5f}  (eps={eps})")

    rep = verify_proposition(p, 50_000, 1, keep_points=False)
    print(f"attackable fraction {rep.fraction:.4f}, 95% CI ({rep.ci_low:.4f}, {rep.ci_high:.4f})")
    print(f"lower bound above 1/3: {rep.ci_low > 1 / 3}")


if __name__ == "__main__":
    main(*map(float, sys.argv[1:4]))
