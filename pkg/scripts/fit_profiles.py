"""Fit per-PE cost coefficients of the device profiles to the reference latencies.

    python scripts/fit_profiles.py            # rewrites src/rowquant/profiles/*.txt
    python scripts/fit_profiles.py --dry-run  # print fitted profiles and per-row errors only

Budgets (LUTs, DSPs, control DSPs) are fixed per device; the five cost
coefficients are fitted by seeded multi-start Nelder-Mead on log latency.
"""

import argparse
import os

from rowquant.assignment import RatioConfig
from rowquant.hwmodel import (
    PROFILE_DIR, REFERENCE_ROWS, DeviceProfile, fit_loss, fit_profile, reference_rows, report,
    resnet18_shape, save_profile,
)

# name, LUTs, DSPs, DSPs used by control logic (pure-PoT rows: 12% of 220, 3% of 900)
DEVICES = [
    ("XC7Z020", 53200, 220, 26),
    ("XC7Z045", 218600, 900, 27),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--starts", type=int, default=16)
    ap.add_argument("--out-dir", default=PROFILE_DIR)
    ap.add_argument("--dry-run", action="store_true")
    args = ap.parse_args()

    shape = resnet18_shape()
    for name, luts, dsps, control in DEVICES:
        base = DeviceProfile(name, luts, dsps, 100.0, 10.0, 1.0, 2.0, dsp_control=control)
        prof = fit_profile(base, shape, seed=args.seed, starts=args.starts)
        rows = reference_rows(name)
        loss = fit_loss(prof, rows, shape)
        print(f"{name}: loss {loss:.5f} over {len(rows)} rows")
        for r in REFERENCE_ROWS:
            got = report(shape, RatioConfig.parse(r.ratio), prof, r.first_last_8bit).latency_ms
            ref = r.latency_ms.get(name)
            print(f"  {r.label:16s} ref {'-' if ref is None else f'{ref:6.1f}':>6}  model {got:7.2f} ms")
        if not args.dry_run:
            path = os.path.join(args.out_dir, name.lower() + ".txt")
            save_profile(prof, path, comment=(
                f"{name} device profile; cost coefficients fitted by scripts/fit_profiles.py "
                f"(seed {args.seed}, {args.starts} starts, log-latency loss {loss:.5f})"))
            print(f"  wrote {path}")


if __name__ == "__main__":
    main()
