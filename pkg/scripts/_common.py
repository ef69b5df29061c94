import argparse
import json
from dataclasses import asdict, fields


def config_from_args(cls, description: str, extra=None):
    """Parse one flag per dataclass field; returns (config, namespace)."""
    ap = argparse.ArgumentParser(description=description)
    for f in fields(cls):
        default = getattr(cls(), f.name)
        ap.add_argument("--" + f.name.replace("_", "-"), type=type(default), default=default)
    if extra:
        extra(ap)
    ns = ap.parse_args()
    return cls(**{f.name: getattr(ns, f.name) for f in fields(cls)}), ns


def emit(cfg, result: dict) -> None:
    print(json.dumps({"config": asdict(cfg), **result}))
