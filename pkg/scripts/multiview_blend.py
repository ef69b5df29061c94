"""Fit two yawed views of one synthetic face and blend their model-space position maps."""

from _common import config_from_args, emit

from facefit.experiments import MultiViewConfig, multiview_blend

if __name__ == "__main__":
    cfg, _ = config_from_args(MultiViewConfig, __doc__)
    emit(cfg, multiview_blend(cfg))
