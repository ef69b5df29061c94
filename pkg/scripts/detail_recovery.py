"""Displacement recovery of a known bump field, plus the zero-detail control.

The fine weights can be overridden to see how strongly the smoothness and
displacement regularizers hold the solution at zero, e.g.

    python scripts/detail_recovery.py --omega-s-fine 1e-6 --omega-d 1e-6
"""

from _common import config_from_args, emit

from facefit.experiments import DetailRecoveryConfig, detail_recovery, zero_detail_control
from facefit.losses import FineWeights


def _weights(ap):
    d = FineWeights()
    ap.add_argument("--omega-s-fine", type=float, default=d.omega_s_fine)
    ap.add_argument("--omega-d", type=float, default=d.omega_d)
    ap.add_argument("--skip-control", action="store_true")


if __name__ == "__main__":
    cfg, ns = config_from_args(DetailRecoveryConfig, __doc__, _weights)
    w = FineWeights(omega_s_fine=ns.omega_s_fine, omega_d=ns.omega_d)
    out = {"weights": {"omega_s_fine": w.omega_s_fine, "omega_d": w.omega_d}, "bump": detail_recovery(cfg, w)}
    if not ns.skip_control:
        out["control"] = zero_detail_control(cfg, w)
    emit(cfg, out)
