"""Pipeline configuration: an INI file of sections, overridable per key.

Schema (every key optional, defaults shown)::

    [paths]
    scans_dir =            ; directory of *.mhd/*.raw volumes
    annotations =          ; LUNA16-style CSV
    output_dir = out
    weights =              ; NTAR1 archive; empty -> use [run] seed

    [window]
    lo = -1000
    hi = 400

    [preprocess]
    radius_scale = 0.5     ; slice kept when |dz| <= radius_scale * diameter

    [swin]
    embed_dim = 96
    depths = 2,2,6,2
    heads = 3,6,12,24
    window = 7
    mlp_ratio = 4

    [detector]
    pre_nms_topk = 1000
    rpn_nms_iou = 0.7
    post_nms_topk = 1000
    score_thresh = 0.05
    final_nms_iou = 0.5
    detections_per_image = 100

    [eval]
    area_cuts =            ; "a,b" in px^2; empty -> tertiles of the gt areas
    max_detections = 100
    hist_bin_width = 25

    [run]
    seed = 0

Overrides use ``section.key=value`` strings and win over the file.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .detect_head import DetectorConfig
from .evaluator import EvalConfig
from .swin_backbone import SwinConfig


class ConfigError(ValueError):
    pass


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(" ", "").split(",") if v)


@dataclass
class PipelineConfig:
    scans_dir: Path | None = None
    annotations: Path | None = None
    output_dir: Path = Path("out")
    weights: Path | None = None
    hu_lo: float = -1000.0
    hu_hi: float = 400.0
    radius_scale: float = 0.5
    swin: SwinConfig = field(default_factory=SwinConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    hist_bin_width: float = 25.0
    seed: int = 0

    def validate(self, need: tuple[str, ...] = ()) -> None:
        if not self.hu_lo < self.hu_hi:
            raise ConfigError(f"window lo ({self.hu_lo}) must be below hi ({self.hu_hi})")
        for name in ("scans_dir", "annotations", "weights"):
            value = getattr(self, name)
            if value is None:
                if name in need:
                    raise ConfigError(f"{name} is required for this command")
            elif not Path(value).exists():
                raise ConfigError(f"{name}: path {value} does not exist")


def _parse(parser: configparser.ConfigParser) -> PipelineConfig:
    def get(section, key, default=None):
        if parser.has_option(section, key):
            v = parser.get(section, key).strip()
            return v if v != "" else default
        return default

    def path(section, key, default=None):
        v = get(section, key)
        return Path(v) if v is not None else default

    try:
        swin_kw, det_kw, eval_kw = {}, {}, {}
        for key, conv in (("embed_dim", int), ("depths", _ints), ("heads", _ints), ("window", int), ("mlp_ratio", int)):
            if (v := get("swin", key)) is not None:
                swin_kw[key] = conv(v)
        for key, conv in (
            ("pre_nms_topk", int), ("rpn_nms_iou", float), ("post_nms_topk", int),
            ("score_thresh", float), ("final_nms_iou", float), ("detections_per_image", int),
        ):
            if (v := get("detector", key)) is not None:
                det_kw[key] = conv(v)
        if (v := get("eval", "area_cuts")) is not None:
            cuts = _floats(v)
            if len(cuts) != 2:
                raise ConfigError("eval.area_cuts needs exactly two values")
            eval_kw["area_cuts"] = cuts
        if (v := get("eval", "max_detections")) is not None:
            eval_kw["max_detections"] = int(v)
        return PipelineConfig(
            scans_dir=path("paths", "scans_dir"),
            annotations=path("paths", "annotations"),
            output_dir=path("paths", "output_dir", Path("out")),
            weights=path("paths", "weights"),
            hu_lo=float(get("window", "lo", -1000)),
            hu_hi=float(get("window", "hi", 400)),
            radius_scale=float(get("preprocess", "radius_scale", 0.5)),
            swin=SwinConfig(**swin_kw),
            detector=DetectorConfig(**det_kw),
            eval=EvalConfig(**eval_kw),
            hist_bin_width=float(get("eval", "hist_bin_width", 25)),
            seed=int(get("run", "seed", 0)),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> PipelineConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        parser.read(p, encoding="utf-8")
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, option, value.strip())
    return _parse(parser)


def with_paths(cfg: PipelineConfig, **paths) -> PipelineConfig:
    """Copy of ``cfg`` with the non-None keyword paths replaced."""
    return replace(cfg, **{k: Path(v) for k, v in paths.items() if v is not None})
