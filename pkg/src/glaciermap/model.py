"""GlaViTU: multi-source fusion block, transformer subnet with a progressive
upsampling decoder, then a residual U-Net and a softmax head."""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import NUM_CLASSES, Sample, track_inputs

CHECKPOINT_FORMAT = "glaciermap-checkpoint"
CHECKPOINT_VERSION = 1
LOCATION_DIMS = {"none": 0, "region": 12, "coord": 4}


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    track: str = "OPT_DEM"
    patch_size_px: int = 384
    token_patch: int = 16
    embed_dim: int = 192
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    branch_channels: int = 32
    fusion_channels: int = 64
    decoder_channels: int = 64
    base_channels: int = 32
    unet_depth: int = 4
    dropout_rate: float = 0.1
    num_classes: int = NUM_CLASSES
    location_mode: str = "none"
    location_hidden: int = 32
    se_reduction: int = 4
    unet_input: str = "concat"
    use_unet: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.patch_size_px % self.token_patch:
            raise ValueError("patch_size_px must be divisible by token_patch")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.location_mode not in LOCATION_DIMS:
            raise ValueError(f"location_mode must be one of {sorted(LOCATION_DIMS)}")
        if self.unet_input not in ("concat", "context"):
            raise ValueError("unet_input must be 'concat' or 'context'")
        if self.token_patch < 4 or self.token_patch & (self.token_patch - 1):
            raise ValueError("token_patch must be a power of two >= 4")
        track_inputs(self.track)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Reduced widths that train on a laptop CPU in minutes."""
        base = dict(
            patch_size_px=32, token_patch=8, embed_dim=32, depth=1, heads=2, mlp_ratio=2,
            branch_channels=8, fusion_channels=16, decoder_channels=16, base_channels=8,
            unet_depth=2, location_hidden=16,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def inputs(self) -> dict[str, int]:
        return {s.name: s.band_count for s in track_inputs(self.track)}

    @property
    def location_dim(self) -> int:
        return LOCATION_DIMS[self.location_mode]


def _norm(c: int) -> nn.GroupNorm:
    groups = next(g for g in (8, 4, 2, 1) if c % g == 0)
    return nn.GroupNorm(groups, c)


def _upsample_factors(token_patch: int) -> list[int]:
    k = int(math.log2(token_patch))
    return [2 ** math.ceil(k / 2), 2 ** (k // 2)]


# --------------------------------------------------------------------------
# fusion

class SqueezeExcitation(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def excitation(self, x):
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.gelu(self.fc1(s))))

    def forward(self, x):
        return x * self.excitation(x)[:, :, None, None]


class ConvBranch(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, se_reduction: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.se = SqueezeExcitation(out_ch, se_reduction)

    def pre_excitation(self, x):
        x = F.gelu(self.norm1(self.conv1(x)))
        return F.gelu(self.norm2(self.conv2(x)))

    def forward(self, x):
        return self.se(self.pre_excitation(x))


class FusionBlock(nn.Module):
    """One conv+SE branch per input source, merged by concat + 1x1 conv.

    An optional location vector passes through a small feed-forward network
    and is broadcast-added to the merged features.
    """

    def __init__(self, inputs: dict[str, int], branch_channels: int, out_channels: int,
                 location_dim: int = 0, location_hidden: int = 32, se_reduction: int = 4):
        super().__init__()
        self.input_names = list(inputs)
        self.branches = nn.ModuleDict(
            {name: ConvBranch(c, branch_channels, se_reduction) for name, c in inputs.items()}
        )
        self.merge = nn.Conv2d(branch_channels * len(inputs), out_channels, 1)
        self.merge_norm = _norm(out_channels)
        self.location_mlp = None
        if location_dim:
            self.location_mlp = nn.Sequential(
                nn.Linear(location_dim, location_hidden),
                nn.GELU(),
                nn.Linear(location_hidden, out_channels),
            )

    def forward(self, features: dict[str, torch.Tensor], location=None):
        if set(features) != set(self.input_names):
            raise ValueError(f"expected inputs {self.input_names}, got {sorted(features)}")
        sizes = {tuple(features[n].shape[-2:]) for n in self.input_names}
        if len(sizes) != 1:
            raise ValueError(f"inputs differ in spatial size: {sizes}")
        for n, branch in self.branches.items():
            if features[n].shape[1] != branch.conv1.in_channels:
                raise ValueError(f"input {n}: expected {branch.conv1.in_channels} bands, got {features[n].shape[1]}")
        x = torch.cat([self.branches[n](features[n]) for n in self.input_names], dim=1)
        x = F.gelu(self.merge_norm(self.merge(x)))
        if self.location_mlp is not None:
            if location is None:
                raise ValueError("model expects a location vector")
            x = x + self.location_mlp(location.to(x.dtype))[:, :, None, None]
        return x


# --------------------------------------------------------------------------
# transformer

class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, d))


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.drop1 = nn.Dropout(dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))
        self.drop2 = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop1(self.attn(self.norm1(x)))
        return x + self.drop2(self.mlp(self.norm2(x)))


class PUPStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, factor: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = _norm(out_ch)
        self.factor = factor

    def forward(self, x):
        x = F.gelu(self.norm(self.conv(x)))
        return F.interpolate(x, scale_factor=self.factor, mode="bilinear", align_corners=False)


class TransformerSubnet(nn.Module):
    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        self.token_patch = cfg.token_patch
        self.grid = cfg.patch_size_px // cfg.token_patch
        self.patch_embed = nn.Conv2d(in_channels, cfg.embed_dim, cfg.token_patch, stride=cfg.token_patch)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid * self.grid, cfg.embed_dim))
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, cfg.dropout_rate) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim) if cfg.depth else nn.Identity()
        stages, c = [], cfg.embed_dim
        for f in _upsample_factors(cfg.token_patch):
            stages.append(PUPStage(c, cfg.decoder_channels, f))
            c = cfg.decoder_channels
        self.decoder = nn.Sequential(*stages)

    def tokens(self, x):
        h, w = x.shape[-2:]
        if h % self.token_patch or w % self.token_patch:
            raise ValueError(f"spatial size {(h, w)} not divisible by token patch {self.token_patch}")
        return self.patch_embed(x).flatten(2).transpose(1, 2)

    def positions(self, gh: int, gw: int):
        if (gh, gw) == (self.grid, self.grid):
            return self.pos_embed
        pe = self.pos_embed.reshape(1, self.grid, self.grid, -1).permute(0, 3, 1, 2)
        pe = F.interpolate(pe, size=(gh, gw), mode="bilinear", align_corners=False)
        return pe.flatten(2).transpose(1, 2)

    def encode(self, tokens, pos):
        x = tokens + pos
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)

    def decode(self, tokens, gh: int, gw: int):
        b, _, d = tokens.shape
        return self.decoder(tokens.transpose(1, 2).reshape(b, d, gh, gw))

    def forward(self, x):
        gh, gw = x.shape[-2] // self.token_patch, x.shape[-1] // self.token_patch
        return self.decode(self.encode(self.tokens(x), self.positions(gh, gw)), gh, gw)


# --------------------------------------------------------------------------
# U-Net

class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        y = F.gelu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.gelu(y + self.skip(x))


class UpStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, dropout: float):
        super().__init__()
        self.reduce = nn.Conv2d(in_ch, out_ch, 1)
        self.block = ResBlock(2 * out_ch, out_ch)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = torch.cat([self.reduce(x), skip], dim=1)
        return self.drop(self.block(x))


class UNetSubnet(nn.Module):
    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        c = cfg.base_channels
        self.stem = ResBlock(in_channels, c)
        self.downs = nn.ModuleList()
        self.ups = nn.ModuleList()
        for _ in range(cfg.unet_depth):
            self.downs.append(nn.Sequential(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), ResBlock(2 * c, 2 * c)))
            self.ups.insert(0, UpStage(2 * c, c, cfg.dropout_rate))
            c *= 2
        self.head = nn.Conv2d(cfg.base_channels, cfg.num_classes, 1)

    def forward(self, x):
        skips = [self.stem(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        x = skips.pop()
        for up in self.ups:
            x = up(x, skips.pop())
        return self.head(x)


class GlaViTU(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.fusion = FusionBlock(
            cfg.inputs, cfg.branch_channels, cfg.fusion_channels,
            cfg.location_dim, cfg.location_hidden, cfg.se_reduction,
        )
        self.transformer = TransformerSubnet(cfg.fusion_channels, cfg)
        if cfg.use_unet:
            in_ch = cfg.decoder_channels + (cfg.fusion_channels if cfg.unet_input == "concat" else 0)
            self.unet = UNetSubnet(in_ch, cfg)
        else:
            self.unet = None
            self.head = nn.Conv2d(cfg.decoder_channels, cfg.num_classes, 1)

    def forward(self, features: dict[str, torch.Tensor], location=None):
        """Return class logits ``(B, C, H, W)``."""
        fused = _checked("fusion", self.fusion(features, location))
        context = _checked("transformer", self.transformer(fused))
        if self.unet is None:
            return _checked("head", self.head(context))
        x = torch.cat([context, fused], dim=1) if self.config.unet_input == "concat" else context
        return _checked("unet", self.unet(x))

    def predict_proba(self, features, location=None):
        return torch.softmax(self(features, location), dim=1)


def _checked(name: str, x: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activations in layer {name}")
    return x


def init_weights(model: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for name, p in model.named_parameters():
        with torch.no_grad():
            if name.endswith("pos_embed"):
                p.copy_(0.02 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
            elif p.ndim >= 2:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) / math.sqrt(fan_in))
            elif "norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()


def build_model(cfg: ModelConfig, dtype=torch.float32) -> GlaViTU:
    model = GlaViTU(cfg)
    init_weights(model, cfg.seed)
    return model.to(dtype).eval()


# --------------------------------------------------------------------------
# inference helpers

def to_batch(samples, dtype=torch.float32):
    """Stack samples into (features, location, onehot) tensors."""
    if isinstance(samples, Sample):
        samples = [samples]
    names = list(samples[0].features)
    feats = {n: torch.as_tensor(np.stack([s.features[n] for s in samples]), dtype=dtype) for n in names}
    loc = None
    if samples[0].location is not None:
        loc = torch.as_tensor(np.stack([s.location for s in samples]), dtype=dtype)
    y = torch.as_tensor(np.stack([s.label_onehot for s in samples]), dtype=dtype)
    return feats, loc, y


def _dtype(model: nn.Module):
    return next(model.parameters()).dtype


def forward(model: GlaViTU, sample: Sample) -> np.ndarray:
    """Deterministic softmax probabilities ``(C, H, W)`` for one sample."""
    feats, loc, _ = to_batch(sample, _dtype(model))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model.predict_proba(feats, loc)[0].cpu().numpy()
    finally:
        model.train(was_training)


def _set_dropout(model: nn.Module, active: bool) -> None:
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.train(active)


def mc_probabilities(model: GlaViTU, feats, loc, n_passes: int, seed: int = 0, chunk: int = 8):
    """Mean of ``n_passes`` softmax outputs with dropout active, per batch item."""
    if n_passes < 1:
        raise ValueError("n_passes must be >= 1")
    was_training = model.training
    model.eval()
    _set_dropout(model, True)
    b = next(iter(feats.values())).shape[0]
    total = None
    try:
        with torch.no_grad(), torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            done = 0
            while done < n_passes:
                k = min(chunk, n_passes - done)
                f = {n: t.repeat(k, 1, 1, 1) for n, t in feats.items()}
                l = None if loc is None else loc.repeat(k, 1)
                p = model.predict_proba(f, l)
                s = p.reshape(k, b, *p.shape[1:]).sum(dim=0)
                total = s if total is None else total + s
                done += k
    finally:
        _set_dropout(model, False)
        model.train(was_training)
    return total / n_passes


def mc_forward(model: GlaViTU, sample: Sample, n_passes: int, seed: int = 0) -> np.ndarray:
    """Monte-Carlo dropout: average softmax over stochastic passes."""
    feats, loc, _ = to_batch(sample, _dtype(model))
    return mc_probabilities(model, feats, loc, n_passes, seed)[0].cpu().numpy()


# --------------------------------------------------------------------------
# checkpoints

def save_state(model: GlaViTU, path) -> None:
    path = Path(path)
    state = model.state_dict()
    index = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, t in state.items():
            arr = t.detach().cpu().contiguous().numpy()
            index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
            zf.writestr(f"tensors/{name}", arr.tobytes(order="C"))
        header = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "tensors": index,
        }
        zf.writestr("checkpoint.json", json.dumps(header, indent=2))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())


def load_state(path, config: ModelConfig | None = None) -> GlaViTU:
    """Load a checkpoint; ``config`` (if given) must produce the same parameter names."""
    path = Path(path)
    if not str(path) or not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {str(path)!r}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("checkpoint.json"))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
            if header.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
            tensors = {}
            for entry in header["tensors"]:
                raw = zf.read(f"tensors/{entry['name']}")
                arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
                tensors[entry["name"]] = torch.from_numpy(arr.copy())
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    cfg = config or ModelConfig.from_dict(header["config"])
    model = GlaViTU(cfg)
    expected = set(model.state_dict())
    missing = sorted(expected - set(tensors))
    unexpected = sorted(set(tensors) - expected)
    if missing or unexpected:
        raise CheckpointError(f"checkpoint does not match config; missing: {missing}; unexpected: {unexpected}")
    dtype = next(iter(tensors.values())).dtype
    model.to(dtype)
    model.load_state_dict(tensors)
    return model.eval()
