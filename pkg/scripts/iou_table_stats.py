#!/usr/bin/env python3
"""Recompute the IOU summary statistics from the published per-image values
and compare them with the reported averages."""
from damagemap import metrics

ROWS = {
    "Annotation A versus DDM": ([0.334, 0.401, 0.568, 0.360, 0.474, 0.270, 0.349, 0.156, 0.418, 0.477],
                                (0.380, 0.116)),
    "Annotation B versus DDM": ([0.444, 0.623, 0.633, 0.473, 0.583, 0.445, 0.258, 0.440, 0.616, 0.658],
                                (0.517, 0.126)),
    "Annotation A versus B": ([0.677, 0.541, 0.744, 0.681, 0.695, 0.546, 0.673, 0.237, 0.621, 0.689],
                              (0.610, 0.146)),
}


def main():
    reports = {name: metrics.iou_report(values) for name, (values, _) in ROWS.items()}
    print(metrics.format_iou_table(reports))
    for name, (_, (mean, std)) in ROWS.items():
        r = reports[name]
        print(f"{name}: recomputed {r.mean:.4f} ± {r.std:.4f} (sample std), "
              f"population std {r.std * ((len(r.values) - 1) / len(r.values)) ** 0.5:.4f}, "
              f"reported {mean:.3f} ± {std:.3f}")


if __name__ == "__main__":
    main()
