"""Coarse recovery from a perturbed start on a synthetic render."""

from _common import config_from_args, emit

from facefit.experiments import CoarseRecoveryConfig, coarse_recovery

if __name__ == "__main__":
    cfg, _ = config_from_args(CoarseRecoveryConfig, __doc__)
    emit(cfg, coarse_recovery(cfg))
