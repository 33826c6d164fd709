"""Portable JSON checkpoints: named tensors, scaler and the resolved config.

Floats are written with ``repr`` precision so a save/load round trip is
bit-exact, and keys are sorted so identical models give identical bytes.
"""

import json

import numpy as np

from . import __version__
from .dataio import Scaler
from .errors import ConfigError
from .recurrent import BlockedModel, Network, NetworkConfig

FORMAT = "bayes_msa.checkpoint/1"


def _encode(value):
    if isinstance(value, np.ndarray):
        return {"shape": list(value.shape), "data": [float(x) for x in value.reshape(-1)]}
    return value


def _decode(entry):
    return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])


def to_payload(cfg, model, scaler):
    networks = []
    for net in model.networks:
        tensors = {}
        for name, entry in net.state().items():
            tensors[name] = {k: _encode(v) for k, v in entry.items()}
        networks.append(tensors)
    return {
        "format": FORMAT,
        "header": cfg.header(),
        "version": __version__,
        "config": cfg.to_dict(),
        "divergence": cfg.train.divergence.to_dict(),
        "scaler": {"min": float(scaler.min), "max": float(scaler.max)},
        "blocks": [list(b) for b in model.blocks],
        "networks": networks,
    }


def save(path, cfg, model, scaler):
    with open(path, "w") as fh:
        json.dump(to_payload(cfg, model, scaler), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load(path):
    """Returns (ExperimentConfig, BlockedModel, Scaler)."""
    from .experiment import ExperimentConfig

    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not a checkpoint ({exc})") from None
    if payload.get("format") != FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    cfg = ExperimentConfig.from_dict(payload["config"])
    base = cfg.network_config()
    nets = []
    for (a, b), tensors in zip(payload["blocks"], payload["networks"]):
        ncfg = NetworkConfig(**{**base.__dict__, "horizon": b - a})
        state = {name: {k: (_decode(v) if isinstance(v, dict) else v) for k, v in entry.items()}
                 for name, entry in tensors.items()}
        nets.append(Network.from_state(ncfg, state))
    model = BlockedModel(nets, [tuple(b) for b in payload["blocks"]])
    scaler = Scaler(payload["scaler"]["min"], payload["scaler"]["max"])
    return cfg, model, scaler
