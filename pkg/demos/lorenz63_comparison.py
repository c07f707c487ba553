"""Small Lorenz-63 comparison of the eight algorithms.

Sequences are short here so the script finishes in a few minutes; the
acceptance suite runs the desk-scale setup (T=500, 50 iterations). The CPF-BS
rows stay close to the observations from this initialization; see the README.

    python demos/lorenz63_comparison.py [out_dir]
"""

import sys

from npsem import ALGORITHMS, ExperimentConfig, run_comparison, write_report


def main(out_dir=None):
    cfg = ExperimentConfig.from_dict({
        "model": "l63", "T": 200, "T_prime": 200, "replications": 1, "seeds": 2024,
        "algorithms": list(ALGORITHMS), "npsem": {"iterations": 10}, "rmse_tail": 3,
    })
    report = run_comparison(cfg)
    print("truth: sigma2_Q = 1, sigma2_R = 4")
    print(f"{'algorithm':18s} {'rmse':>7s} {'sigma2_Q':>9s} {'sigma2_R':>9s}  coverage")
    for e in report.entries:
        if e.error is not None:
            print(f"{e.algorithm:18s} failed: {e.error}")
            continue
        _, s2q, s2r, *_ = e.trace_rows[-1]
        cov = " ".join(f"{c:.2f}" for c in e.coverage95)
        print(f"{e.algorithm:18s} {e.rmse:7.3f} {s2q:9.3f} {s2r:9.3f}  {cov}")
    if out_dir:
        write_report(report, out_dir)
        print(f"CSVs written to {out_dir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
