"""Encoder + allocation block, and the flat ``.npz`` checkpoint format."""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .decision import AllocationBlock, DecisionConfig
from .encoder import ContextEncoder, EncoderConfig

META_KEY = "__meta__"


@dataclass
class ModelConfig:
    lookback: int
    num_features: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    return_channel: int = 0
    volume_channel: int = 1

    @property
    def horizon(self):
        return self.decision.horizon

    @property
    def total_steps(self):
        return self.lookback + self.horizon

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        d["decision"] = DecisionConfig(**d.get("decision", {}))
        return cls(**d)


class LargeExecutionModel(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.encoder = ContextEncoder(cfg.num_features, cfg.encoder)
        self.decision = AllocationBlock(cfg.encoder.hidden_size, cfg.num_features, cfg.decision,
                                        cfg.return_channel, cfg.volume_channel)

    def forward(self, features, return_context=False):
        """[B, L+N, D] -> allocations [B, N, N+1, 4, 2]."""
        T = self.cfg.total_steps
        if features.shape[1] != T or features.shape[2] != self.cfg.num_features:
            raise ValueError(f"expected features [B, {T}, {self.cfg.num_features}], got {list(features.shape)}")
        context = self.encoder(features)
        L = self.cfg.lookback
        alloc = self.decision(context[:, L:], features[:, L:])
        if return_context:
            return alloc, context
        return alloc


def save_checkpoint(model, path, extra=None):
    """Write every parameter/buffer as a row-major array keyed by its dotted name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    meta = {"model": model.cfg.to_dict(), "dtype": str(next(model.parameters()).dtype).replace("torch.", "")}
    if extra:
        meta.update(extra)
    arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint_meta(path):
    with np.load(path, allow_pickle=False) as data:
        return json.loads(str(data[META_KEY]))


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data[META_KEY]))
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files if k != META_KEY}
    model = LargeExecutionModel(ModelConfig.from_dict(meta["model"]))
    model.to(getattr(torch, meta.get("dtype", "float32")))
    model.load_state_dict(state)
    model.eval()
    return model, meta
