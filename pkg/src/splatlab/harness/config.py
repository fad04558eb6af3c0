"""Run configuration: INI-style file, documented defaults, flag overrides."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields

from ..normalcomp import LossWeights
from ..synth import PerturbSpec, SceneSpec, TextureSpec


@dataclass
class RunConfig:
    """One experiment. Attribute names are `<section>_<key>` in the file."""

    # [scene]
    scene_kind: str = "sphere"
    scene_extent: float = 1.0
    scene_texture: str = "checker"
    scene_texture_scale: float = 0.22
    scene_albedo_a: tuple = (0.82, 0.72, 0.60)
    scene_albedo_b: tuple = (0.28, 0.38, 0.52)
    scene_light_dir: tuple = (0.45, 0.35, 0.85)
    scene_ambient: float = 0.3
    scene_gt_points: int = 16384

    # [views]
    views_count: int = 16
    views_width: int = 64
    views_height: int = 64

    # [gaussians]
    gaussians_count: int = 1200
    gaussians_jitter_frac: float = 0.05     # of scene extent
    gaussians_init_opacity: float = 0.5
    gaussians_init_color: float = 0.5
    gaussians_scale_factor: float = 0.6     # of the mean surface spacing

    # [perturb]
    perturb_enabled: bool = True
    perturb_brightness_lo: float = 0.5
    perturb_brightness_hi: float = 1.5
    perturb_contrast_lo: float = 0.5
    perturb_contrast_hi: float = 1.5
    perturb_gamma_choices: tuple = (0.1, 0.8)

    # [train]
    train_iterations: int = 2000
    train_seed: int = 1
    train_mvs_interval: int = 4
    train_snapshot_interval: int = 0        # 0 = no PPM snapshots
    train_chamfer_samples: int = 16384
    train_tile: int = 16

    # [loss]
    loss_lambda: float = 0.2
    loss_threshold: float = 0.1
    loss_w_illum: float = 1.0
    loss_w_normal: float = 0.15
    loss_w_gradient: float = 0.0015
    loss_w_mvs: float = 0.03
    loss_gate_gradient: bool = False
    loss_normal_noise: float = 0.0

    # [optim]
    optim_lr_position: float = 2e-4         # scaled by scene extent
    optim_lr_log_scale: float = 5e-3
    optim_lr_rotation: float = 1e-3
    optim_lr_opacity: float = 5e-2
    optim_lr_color: float = 2.5e-3
    optim_lr_gamma: float = 5e-2
    optim_lr_conv: float = 1e-3
    optim_lr_illum_map: float = 5e-2

    # [ablation]
    ablation_illum: bool = True
    ablation_normal: bool = True
    ablation_mvs: bool = True

    # [output]
    output_dir: str = "runs/out"

    def validate(self):
        if self.views_width < 16 or self.views_height < 16:
            raise ValueError("resolution must be at least 16")
        if self.train_iterations < 1:
            raise ValueError("need at least one iteration")
        if self.views_count < 2:
            raise ValueError("need at least two views")
        return self

    # ------------------------------------------------------------------
    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            kind=self.scene_kind, extent=self.scene_extent,
            texture=TextureSpec(mode=self.scene_texture,
                                scale=self.scene_texture_scale,
                                albedo_a=tuple(self.scene_albedo_a),
                                albedo_b=tuple(self.scene_albedo_b)),
            light_dir=tuple(self.scene_light_dir), ambient=self.scene_ambient,
            n_gt_points=self.scene_gt_points, seed=self.train_seed)

    def perturb_spec(self) -> PerturbSpec:
        return PerturbSpec(
            brightness_lo=self.perturb_brightness_lo,
            brightness_hi=self.perturb_brightness_hi,
            contrast_lo=self.perturb_contrast_lo,
            contrast_hi=self.perturb_contrast_hi,
            gamma_choices=tuple(self.perturb_gamma_choices),
            seed=self.train_seed)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lam=self.loss_lambda, threshold=self.loss_threshold,
            w_illum=self.loss_w_illum, w_normal=self.loss_w_normal,
            w_gradient=self.loss_w_gradient, w_mvs=self.loss_w_mvs,
            gate_gradient=self.loss_gate_gradient)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(tok) for tok in raw.replace(",", " ").split())
    return raw


def _attr_for(section: str, key: str) -> str:
    if section == "views" and key == "n_views":
        return "views_count"
    return f"{section}_{key}"


def load_config(path=None, overrides=None) -> RunConfig:
    """Config file plus `section.key=value` override strings (flags win)."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        with open(path) as f:
            parser.read_file(f)
        for section in parser.sections():
            for key, raw in parser.items(section):
                attr = _attr_for(section, key)
                if not hasattr(cfg, attr):
                    raise KeyError(f"unknown config key [{section}] {key}")
                setattr(cfg, attr, _coerce(raw, getattr(cfg, attr)))
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must look like section.key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ValueError(f"override key must be section.key: {dotted!r}")
        section, key = dotted.split(".", 1)
        attr = _attr_for(section.strip(), key.strip())
        if not hasattr(cfg, attr):
            raise KeyError(f"unknown config key {dotted!r}")
        setattr(cfg, attr, _coerce(raw, getattr(cfg, attr)))
    return cfg.validate()
