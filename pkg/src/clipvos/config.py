"""Hyperparameter dataclasses, the desk/paper presets, and config-file I/O.

The config file is a flat human-readable key=value format with one section
per sub-config ([pipeline], [encoder], [icr], [pmm], [train], [synth]);
see docs/config.md for every key and default.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field


@dataclass
class EncoderConfig:
    feature_stride: int = 4
    c_k: int = 16
    c_v: int = 32
    c_k_intra: int = 32
    stage_channels: tuple = (16, 24, 32)
    value_channels: tuple = (16, 24)
    use_others_mask: bool = True
    intra_share_trunk: bool = True  # local-key head taps the full trunk (1x1 head)

    def validate(self):
        fs = self.feature_stride
        if fs < 1 or (fs & (fs - 1)) != 0:
            raise ValueError(f"feature_stride must be a power of two, got {fs}")
        widths = (self.c_k, self.c_v, self.c_k_intra, *self.stage_channels, *self.value_channels)
        if any(w < 1 for w in widths):
            raise ValueError("all channel widths must be >= 1")
        n_stride2 = fs.bit_length() - 1
        if len(self.stage_channels) < n_stride2:
            raise ValueError(f"need at least {n_stride2} encoder stages for stride {fs}")
        return self


@dataclass
class ICRConfig:
    num_layers: int = 2
    width: int = 32
    temporal_window: int = 2
    spatial_window: int = 7
    heads: int = 1
    ffn_hidden: int = 0          # 0 -> 2 * c_v
    use_position_bias: bool = False

    def validate(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.temporal_window < 1 or self.spatial_window < 1:
            raise ValueError("window sizes must be >= 1")
        if self.heads < 1 or self.width % self.heads != 0:
            raise ValueError(f"width {self.width} must be divisible by heads {self.heads}")
        return self


@dataclass
class PMMConfig:
    segment_length: int = 5
    enabled: bool = True

    def validate(self):
        if self.segment_length < 1:
            raise ValueError("segment_length must be >= 1")
        return self


@dataclass
class TrainConfig:
    clip_len: int = 3                 # N; a sample holds 2N+1 frames
    inter_clip_gap_start: int = 5
    inter_clip_gap_peak: int = 15
    inter_clip_gap_end: int = 5
    intra_clip_gap_max: int = 5
    bootstrap_ratio: float = 0.15
    bootstrap_warmup_frac: float = 0.2  # plain-mean CE for this fraction of steps
    optimizer: str = "adam"             # "adam" | "sgd"
    lr: float = 3e-4
    momentum: float = 0.9
    steps: int = 5000
    pretrain_steps: int = 2000
    weight_clip: float = 1.0            # weight on the clip-level (dice) term
    weight_image: float = 1.0           # weight on the image-level (CE) term
    frame_wise: bool = False            # ablation arm: 3 frames, CE only
    seed: int = 0

    def validate(self):
        if self.clip_len < 1:
            raise ValueError("clip_len must be >= 1")
        gaps = (self.inter_clip_gap_start, self.inter_clip_gap_peak,
                self.inter_clip_gap_end, self.intra_clip_gap_max)
        if any(g < 1 for g in gaps):
            raise ValueError("gaps must be >= 1")
        if not (0.0 < self.bootstrap_ratio <= 1.0):
            raise ValueError("bootstrap_ratio must be in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        return self


@dataclass
class SynthConfig:
    resolution: int = 64
    num_objects: int = 2
    shapes: tuple = ("circle", "rectangle", "triangle")
    length: int = 24
    min_radius: int = 6
    max_radius: int = 11
    speed: float = 2.0               # base linear velocity, px/frame
    wobble: float = 1.0              # sinusoidal velocity perturbation amplitude
    appearance_drift: float = 0.025  # per-frame object color drift fraction
    occlusion_prob: float = 0.5      # chance object paths are steered to cross
    texture_noise: float = 0.06      # per-pixel noise fraction
    seed: int = 0

    def validate(self):
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")
        if not (1 <= self.num_objects <= 3):
            raise ValueError("num_objects must be in 1..3")
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if self.max_radius * 2 >= self.resolution:
            raise ValueError("objects larger than frame")
        return self


@dataclass
class PipelineConfig:
    clip_length: int = 5
    top_k: int = 20
    threads: int = 1
    seed: int = 0
    preset: str = "desk"
    use_icr: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    icr: ICRConfig = field(default_factory=ICRConfig)
    pmm: PMMConfig = field(default_factory=PMMConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self):
        if self.clip_length < 1:
            raise ValueError("clip_length must be >= 1")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be >= 1 (or unset)")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        self.encoder.validate()
        self.icr.validate()
        self.pmm.validate()
        self.train.validate()
        self.synth.validate()
        return self


def paper_preset() -> PipelineConfig:
    """Channel widths from the original full-scale recipe (C_k 64, C_v 512, width 256)."""
    cfg = PipelineConfig(preset="paper")
    cfg.encoder = EncoderConfig(c_k=64, c_v=512, c_k_intra=256,
                                stage_channels=(64, 128, 256), value_channels=(64, 128))
    cfg.icr = ICRConfig(width=256)
    return cfg


def desk_preset() -> PipelineConfig:
    return PipelineConfig(preset="desk")


def make_config(preset: str = "desk") -> PipelineConfig:
    if preset == "desk":
        return desk_preset()
    if preset == "paper":
        return paper_preset()
    raise ValueError(f"unknown preset {preset!r} (expected 'desk' or 'paper')")


_SECTIONS = {
    "encoder": EncoderConfig,
    "icr": ICRConfig,
    "pmm": PMMConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
}


def _parse_value(current, text: str):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if current and isinstance(current[0], int):
            return tuple(int(p) for p in parts)
        return tuple(parts)
    return text


def load_config(path) -> PipelineConfig:
    """Read a config file; unset keys keep their preset defaults."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    preset = parser.get("pipeline", "preset", fallback="desk")
    cfg = make_config(preset)
    for section, obj_name in [("pipeline", None)] + [(s, s) for s in _SECTIONS]:
        if not parser.has_section(section):
            continue
        target = cfg if obj_name is None else getattr(cfg, obj_name)
        for key, text in parser.items(section):
            if not hasattr(target, key):
                raise ValueError(f"unknown config key [{section}] {key}")
            current = getattr(target, key)
            if dataclasses.is_dataclass(current):
                raise ValueError(f"[{section}] {key} is a sub-config, not a value")
            setattr(target, key, _parse_value(current, text))
    return cfg.validate()


def save_config(cfg: PipelineConfig, path) -> None:
    parser = configparser.ConfigParser()
    top = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if not dataclasses.is_dataclass(val):
            top[f.name] = _format_value(val)
    parser["pipeline"] = top
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        parser[section] = {f.name: _format_value(getattr(sub, f.name))
                           for f in dataclasses.fields(sub)}
    with open(path, "w") as fh:
        parser.write(fh)


def _format_value(val) -> str:
    if isinstance(val, tuple):
        return ",".join(str(v) for v in val)
    return str(val)


def resolve_threads(cfg: PipelineConfig) -> int:
    """Apply the CLIPVOS_THREADS environment override, if set."""
    env = os.environ.get("CLIPVOS_THREADS")
    if env:
        cfg.threads = max(1, int(env))
    return cfg.threads
