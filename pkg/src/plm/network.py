"""Siamese pixel-level matching network.

Pipeline per pair: shared conv/pool extractor -> per-stage compressors
(3x3 conv, ReLU, LRN) -> concatenated query+search vector -> four FC layers
-> 50x50 matching table -> zero-padded 3x3 decoding convolutions.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import LABEL_SIZE, PATCH_SIZE

GROUPS = ("extractor", "compressors", "similarity_fc", "decoder")
CHECKPOINT_FORMAT = "plm-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureConfig:
    stage_channels: tuple = (64, 128, 256)
    compression_ratio: int = 16
    fc_sizes: tuple = (2048, 2048, 2048, 2500)
    decoder_depth: int = 9
    lrn_size: int = 5
    lrn_alpha: float = 1e-4
    lrn_beta: float = 0.75
    lrn_k: float = 1.0
    single_layer: bool = False
    input_size: int = PATCH_SIZE
    # init knobs for the three hidden FC layers and the last FC weight
    fc_hidden_bias: float = 0.0
    fc_out_scale: float = 1.0

    def validate(self) -> "ArchitectureConfig":
        if not self.stage_channels:
            raise ConfigError("at least one extractor stage is required")
        if not self.single_layer:
            for c in self.stage_channels:
                if c % self.compression_ratio:
                    raise ConfigError(f"stage width {c} not divisible by compression ratio {self.compression_ratio}")
        if len(self.fc_sizes) != 4 or self.fc_sizes[-1] != LABEL_SIZE * LABEL_SIZE:
            raise ConfigError(f"fc_sizes must have 4 entries ending in {LABEL_SIZE * LABEL_SIZE}")
        if self.decoder_depth < 1:
            raise ConfigError("decoder_depth must be >= 1")
        return self

    def stage_sizes(self) -> List[int]:
        sizes, s = [], self.input_size
        for _ in self.stage_channels:
            s = math.ceil(s / 2)
            sizes.append(s)
        return sizes

    def compressed_channels(self) -> List[int]:
        return [c // self.compression_ratio for c in self.stage_channels]

    def fc_input_size(self) -> int:
        sizes = self.stage_sizes()
        if self.single_layer:
            return 2 * sizes[-1] ** 2 * self.stage_channels[-1]
        return 2 * sum(s * s * c for s, c in zip(sizes, self.compressed_channels()))

    def decoder_channels(self) -> List[int]:
        x = self.decoder_depth
        return [1] + [2 ** (x - 1 - i) for i in range(x)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["fc_sizes"] = list(self.fc_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        d["fc_sizes"] = tuple(d["fc_sizes"])
        return cls(**d)


DEFAULT = ArchitectureConfig()
TINY = ArchitectureConfig(
    stage_channels=(8, 16),
    compression_ratio=4,
    fc_sizes=(64, 64, 64, 2500),
    decoder_depth=3,
    # at this width zero-bias FC units die on all-positive inputs and the
    # output collapses to a constant; positive biases and a small last layer
    # keep every unit active and the start near the label prior
    fc_hidden_bias=3.0,
    fc_out_scale=0.01,
)
PROFILES = {"default": DEFAULT, "tiny": TINY}


def profile(name: str, **overrides) -> ArchitectureConfig:
    try:
        cfg = PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown architecture profile {name!r}") from None
    return replace(cfg, **overrides).validate()


def local_response_norm(a: torch.Tensor, size: int, alpha: float, beta: float, k: float) -> torch.Tensor:
    """Across-channel LRN: a / (k + alpha/size * sum_{window} a^2) ** beta."""
    sq = a * a
    lo, hi = size // 2, (size - 1) // 2
    padded = F.pad(sq, (0, 0, 0, 0, lo, hi))
    c = a.shape[1]
    window = sum(padded[:, i : i + c] for i in range(size))
    return a / (k + alpha / size * window) ** beta


class LRN(nn.Module):
    def __init__(self, size=5, alpha=1e-4, beta=0.75, k=1.0):
        super().__init__()
        self.size, self.alpha, self.beta, self.k = size, alpha, beta, k

    def forward(self, x):
        return local_response_norm(x, self.size, self.alpha, self.beta, self.k)


class Compressor(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cfg: ArchitectureConfig):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.lrn = LRN(cfg.lrn_size, cfg.lrn_alpha, cfg.lrn_beta, cfg.lrn_k)

    def forward(self, x):
        return self.lrn(F.relu(self.conv(x)))


class MatchingNetwork(nn.Module):
    """Parameters live in four groups: ``extractor``, ``compressors``,
    ``similarity_fc`` and ``decoder``. Both Siamese streams run through the
    same extractor and compressor modules, so only one copy of those weights
    exists."""

    def __init__(self, cfg: ArchitectureConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg.validate()
        self.seed = seed
        chans = [3] + list(cfg.stage_channels)
        self.extractor = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(len(cfg.stage_channels)))
        if cfg.single_layer:
            self.compressors = nn.ModuleList()
        else:
            self.compressors = nn.ModuleList(
                Compressor(c, c // cfg.compression_ratio, cfg) for c in cfg.stage_channels
            )
        sizes = [cfg.fc_input_size()] + list(cfg.fc_sizes)
        self.similarity_fc = nn.ModuleList(nn.Linear(sizes[i], sizes[i + 1]) for i in range(4))
        dch = cfg.decoder_channels()
        self.decoder = nn.ModuleList(nn.Conv2d(dch[i], dch[i + 1], 3, padding=1) for i in range(len(dch) - 1))
        self.register_buffer("channel_mean", torch.zeros(3))
        self._pattern: Optional[list] = None

    def _relu(self, x: torch.Tensor) -> torch.Tensor:
        if self._pattern is not None:
            self._pattern.append(x > 0)
        return F.relu(x)

    def _pool(self, x: torch.Tensor) -> torch.Tensor:
        if self._pattern is not None:
            x, idx = F.max_pool2d(x, 2, stride=2, ceil_mode=True, return_indices=True)
            self._pattern.append(idx)
            return x
        return F.max_pool2d(x, 2, stride=2, ceil_mode=True)

    # -- groups -------------------------------------------------------------

    def group(self, name: str) -> nn.Module:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def group_parameters(self) -> Dict[str, Dict[str, nn.Parameter]]:
        return {g: dict(self.group(g).named_parameters()) for g in GROUPS}

    def set_trainable(self, **flags: bool) -> None:
        for g, flag in flags.items():
            for p in self.group(g).parameters():
                p.requires_grad_(flag)

    def trainable_groups(self) -> List[str]:
        return [g for g in GROUPS if any(p.requires_grad for p in self.group(g).parameters())]

    # -- forward pieces -----------------------------------------------------

    def extract_features(self, x: torch.Tensor) -> List[torch.Tensor]:
        if x.shape[-2:] != (self.cfg.input_size, self.cfg.input_size) or x.shape[-3] != 3:
            raise ValueError(f"expected (B, 3, {self.cfg.input_size}, {self.cfg.input_size}) input, got {tuple(x.shape)}")
        feats = []
        for conv in self.extractor:
            # inputs are post-ReLU (>= 0), so ceil-mode padding acts as zero padding
            x = self._pool(self._relu(conv(x)))
            feats.append(x)
        return feats

    def compress(self, feats: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        return [c.lrn(self._relu(c.conv(f))) for c, f in zip(self.compressors, feats)]

    def stream(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = self.extract_features(x)
        if self.cfg.single_layer:
            return feats[-1:]
        return self.compress(feats)

    def encode_similarity(self, query_feats, search_feats) -> torch.Tensor:
        b = query_feats[0].shape[0]
        v = torch.cat([f.reshape(b, -1) for f in list(query_feats) + list(search_feats)], dim=1)
        for i, fc in enumerate(self.similarity_fc):
            v = fc(v)
            if i < len(self.similarity_fc) - 1:
                v = self._relu(v)
        return v.reshape(b, 1, LABEL_SIZE, LABEL_SIZE)

    def decode_objectness(self, table: torch.Tensor) -> torch.Tensor:
        x = table
        for i, conv in enumerate(self.decoder):
            x = conv(x)
            if i < len(self.decoder) - 1:
                x = self._relu(x)
        return x

    def forward(self, query: torch.Tensor, search: torch.Tensor) -> torch.Tensor:
        """(B, 3, 100, 100) query and search batches in [0, 1] -> (B, 50, 50)."""
        mean = self.channel_mean.view(1, 3, 1, 1).to(query.dtype)
        table = self.encode_similarity(self.stream(query - mean), self.stream(search - mean))
        return self.decode_objectness(table)[:, 0]

    def forward_trace(self, query: torch.Tensor, search: torch.Tensor) -> "ForwardTrace":
        """Forward pass that also records every ReLU sign pattern and max-pool
        argmax, i.e. the active set that fixes the local linear pieces."""
        self._pattern = []
        try:
            out = self(query, search)
            return ForwardTrace(out, self._pattern)
        finally:
            self._pattern = None


@dataclass
class ForwardTrace:
    output: torch.Tensor
    pattern: list

    def same_pieces(self, other: "ForwardTrace") -> bool:
        return len(self.pattern) == len(other.pattern) and all(
            torch.equal(a, b) for a, b in zip(self.pattern, other.pattern)
        )


def init_network(cfg: ArchitectureConfig, rng_seed: int = 0) -> MatchingNetwork:
    """Zero-mean uniform weights with standard deviation sqrt(2 / fan_in),
    i.e. U(-b, b) with b = sqrt(6 / fan_in); biases zero.

    ``cfg.fc_hidden_bias`` fills the biases of the three hidden FC layers and
    ``cfg.fc_out_scale`` multiplies the last FC weight (0 and 1 by default).
    """
    cfg.validate()
    gen = torch.Generator().manual_seed(int(rng_seed))
    net = MatchingNetwork(cfg, seed=rng_seed)
    with torch.no_grad():
        for g in GROUPS:
            for name, p in net.group(g).named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = p[0].numel()
                    s = math.sqrt(6.0 / fan_in)
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul_(2 * s).sub_(s).to(p.dtype))
        fcs = [m for m in net.similarity_fc if isinstance(m, nn.Linear)]
        for fc in fcs[:-1]:
            fc.bias.fill_(cfg.fc_hidden_bias)
        fcs[-1].weight.mul_(cfg.fc_out_scale)
    return net


def to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack (H, W, 3) arrays into a (B, 3, H, W) tensor."""
    arr = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def forward_patches(net: MatchingNetwork, query, searches) -> np.ndarray:
    """Run one query patch against a list of search patches; returns (B, 50, 50)."""
    dtype = next(net.parameters()).dtype
    s = to_tensor([p.pixels for p in searches], dtype)
    q = to_tensor([query.pixels], dtype).expand(len(searches), -1, -1, -1)
    with torch.no_grad():
        return net(q, s).double().numpy()


# -- loss -------------------------------------------------------------------


def loss(output: torch.Tensor, label: torch.Tensor, kind: str = "l1") -> torch.Tensor:
    """Per-pixel distance averaged over the N x N grid (and the batch)."""
    if output.shape != label.shape:
        raise ValueError(f"shape mismatch: {tuple(output.shape)} vs {tuple(label.shape)}")
    diff = output - label
    if kind == "l1":
        return diff.abs().mean()
    if kind == "l2sq":
        return (diff * diff).mean()
    raise ConfigError(f"unknown loss {kind!r}")


def backward(net: MatchingNetwork, output: torch.Tensor, label: torch.Tensor, kind: str = "l1") -> Dict[str, Dict[str, torch.Tensor]]:
    """Gradients of the loss for every trainable group. Frozen groups are
    omitted from the result."""
    net.zero_grad(set_to_none=True)
    loss(output, label, kind).backward()
    grads = {}
    for g in net.trainable_groups():
        grads[g] = {
            n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in net.group(g).named_parameters()
            if p.requires_grad
        }
    return grads


# -- checkpoints ------------------------------------------------------------


def state_payload(net: MatchingNetwork, extra: Optional[dict] = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": net.cfg.to_dict(),
        "seed": int(net.seed),
        "channel_mean": net.channel_mean.detach().double().tolist(),
        "dtype": str(next(net.parameters()).dtype).replace("torch.", ""),
        "parameters": {
            g: {n: p.detach().clone().contiguous() for n, p in net.group(g).named_parameters()} for g in GROUPS
        },
        "extra": extra or {},
    }


def save_checkpoint(net: MatchingNetwork, path, extra: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(state_payload(net, extra), buf)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(network, extra)``."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: checkpoint version {payload['version']} is newer than supported")
    cfg = ArchitectureConfig.from_dict(payload["architecture"])
    net = MatchingNetwork(cfg, seed=payload["seed"])
    net = net.to(getattr(torch, payload.get("dtype", "float32")))
    with torch.no_grad():
        for g, params in payload["parameters"].items():
            own = dict(net.group(g).named_parameters())
            for n, t in params.items():
                own[n].copy_(t)
        net.channel_mean.copy_(torch.tensor(payload["channel_mean"], dtype=net.channel_mean.dtype))
    return net, payload.get("extra", {})


def parameter_hash(net: MatchingNetwork) -> str:
    h = hashlib.sha256()
    for g in GROUPS:
        for n, p in net.group(g).named_parameters():
            h.update(f"{g}.{n}".encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
