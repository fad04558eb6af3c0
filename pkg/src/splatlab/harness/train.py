"""Training loop wiring the illumination objective, normal compensation and
multi-view consistency together, plus dataset generation and reporting."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .. import __version__
from ..illum import (ConvWeights, GammaParams, IlluminationField,
                     _photometric_bwd, _photometric_fwd, illum_backward,
                     illum_forward, save_illum_state)
from ..imgcore import ImageRGB, cdf_rank, luminance, write_pfm, write_pfm_scalar, write_ppm
from ..normalcomp import (_gradient_loss_fwd, _gradient_loss_bwd,
                          _normal_loss_fwd, _normal_loss_bwd, total_loss)
from ..splat import (GaussianCloud, export_ply, mvs_backward, mvs_consistency,
                     rasterize_backward, rasterize_with_cache, save_cloud)
from ..splat.adam import AdamGroup
from ..synth import (ReferenceNormalProvider, make_cameras, perturb_draws,
                     apply_perturbation, render_gt, sample_gt_points)
from .chamfer import chamfer, sample_points
from .config import RunConfig

ILLUM_MAP_FLOOR = 1e-4   # positivity projection for the illumination grid


class TrainAbort(RuntimeError):
    """Raised when a loss turns non-finite; the CLI maps it to exit code 2."""


@dataclass
class Report:
    final_chamfer: float
    gated_fraction: float          # mean gated-pixel share over iterations
    iterations: int
    n_views: int
    n_gaussians: int
    loss_first: dict
    loss_last: dict
    config: dict
    code_version: str
    wall_clock_seconds: float

    def to_json(self, include_timing: bool = False) -> str:
        d = {
            "final_chamfer": self.final_chamfer,
            "gated_fraction": self.gated_fraction,
            "iterations": self.iterations,
            "n_views": self.n_views,
            "n_gaussians": self.n_gaussians,
            "loss_first": self.loss_first,
            "loss_last": self.loss_last,
            "config": self.config,
            "code_version": self.code_version,
        }
        if include_timing:
            d["wall_clock_seconds"] = self.wall_clock_seconds
        return json.dumps(d, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

class Dataset:
    """Per-view training buffers, all derived deterministically from config."""

    def __init__(self, cfg: RunConfig):
        self.scene = cfg.scene_spec()
        self.gt_points = sample_gt_points(self.scene)
        self.cams = make_cameras(self.scene, cfg.views_count,
                                 cfg.views_width, cfg.views_height)
        pspec = cfg.perturb_spec()
        provider = ReferenceNormalProvider(self.scene, cfg.loss_normal_noise,
                                           seed=cfg.train_seed)
        self.clean = []
        self.images = []      # training targets (perturbed unless disabled)
        self.ranks = []       # luminance CDF rank of each training target
        self.normals = []     # reference-normal oracle maps
        self.depths = []      # exact depth maps (oracle diagnostics)
        self.draws = []
        for v, cam in enumerate(self.cams):
            img, _nrm, dep = render_gt(self.scene, cam)
            self.clean.append(img)
            if cfg.perturb_enabled:
                beta, kappa, gamma = perturb_draws(pspec, v)
                timg = apply_perturbation(img, beta, kappa, gamma)
                self.draws.append((beta, kappa, gamma))
            else:
                timg = img
                self.draws.append((1.0, 1.0, 1.0))
            self.images.append(timg)
            self.ranks.append(cdf_rank(luminance(timg)).data)
            self.normals.append(provider.reference_normals(cam, v))
            self.depths.append(dep)


def generate_dataset(cfg: RunConfig, outdir) -> Dataset:
    """Write per-view PFM/PPM files and a line-oriented manifest."""
    ds = Dataset(cfg)
    os.makedirs(outdir, exist_ok=True)
    lines = [
        f"scene {ds.scene.kind} extent {ds.scene.extent!r} seed {cfg.train_seed}",
        f"views {len(ds.cams)} width {cfg.views_width} height {cfg.views_height}",
    ]
    for v, cam in enumerate(ds.cams):
        write_pfm(ds.images[v], os.path.join(outdir, f"view_{v:03d}.pfm"))
        write_ppm(ds.images[v], os.path.join(outdir, f"view_{v:03d}.ppm"))
        beta, kappa, gamma = ds.draws[v]
        rot = " ".join(repr(x) for x in cam.rotation.ravel())
        tr = " ".join(repr(x) for x in cam.translation)
        lines.append(
            f"view {v} fx {cam.fx!r} fy {cam.fy!r} cx {cam.cx!r} cy {cam.cy!r} "
            f"rot {rot} t {tr} perturb {beta!r} {kappa!r} {gamma!r}")
    with open(os.path.join(outdir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    return ds


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _surface_area(scene) -> float:
    if scene.kind == "sphere":
        return float(np.pi * scene.extent ** 2)
    if scene.kind == "plane":
        return float(scene.extent ** 2)
    return float(6.0 * scene.extent ** 2)


def _init_cloud(cfg: RunConfig, ds: Dataset) -> GaussianCloud:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.train_seed, 0xC10D]))
    spacing = np.sqrt(_surface_area(ds.scene) / cfg.gaussians_count)
    return GaussianCloud.from_surface_points(
        ds.gt_points, cfg.gaussians_count,
        jitter_sigma=cfg.gaussians_jitter_frac * cfg.scene_extent,
        init_scale=cfg.gaussians_scale_factor * spacing,
        init_opacity=cfg.gaussians_init_opacity,
        init_color=np.full(3, cfg.gaussians_init_color), rng=rng)


def _dump_diagnostics(outdir, it, out, losses):
    ddir = os.path.join(outdir, "diagnostics")
    os.makedirs(ddir, exist_ok=True)
    with open(os.path.join(ddir, "abort.txt"), "w") as f:
        f.write(f"non-finite loss at iteration {it}: {losses}\n")
    try:
        write_pfm(out.color, os.path.join(ddir, f"color_{it:06d}.pfm"))
        write_pfm_scalar(out.depth, os.path.join(ddir, f"depth_{it:06d}.pfm"))
        write_pfm_scalar(out.alpha, os.path.join(ddir, f"alpha_{it:06d}.pfm"))
    except ValueError:
        pass  # buffers themselves may be non-finite; the text record remains


def train(cfg: RunConfig, outdir=None) -> Report:
    """Run the full optimization; returns the Report (and writes artifacts)."""
    t_start = time.perf_counter()
    outdir = cfg.output_dir if outdir is None else outdir
    os.makedirs(outdir, exist_ok=True)
    ds = Dataset(cfg)
    cloud = _init_cloud(cfg, ds)
    weights = cfg.loss_weights()
    n_views = len(ds.cams)

    use_illum = cfg.ablation_illum
    use_normal = cfg.ablation_normal
    use_mvs = cfg.ablation_mvs

    rng_conv = np.random.default_rng(np.random.SeedSequence([cfg.train_seed, 0xC0BB]))
    conv = ConvWeights.initial(rng_conv)
    gammas = [GammaParams() for _ in range(n_views)]
    fields = [IlluminationField() for _ in range(n_views)]

    groups = {
        "position": AdamGroup([(cloud.positions, cloud.g_positions)],
                              cfg.optim_lr_position * cfg.scene_extent),
        "log_scale": AdamGroup([(cloud.log_scales, cloud.g_log_scales)],
                               cfg.optim_lr_log_scale),
        "rotation": AdamGroup([(cloud.rotations, cloud.g_rotations)],
                              cfg.optim_lr_rotation),
        "opacity": AdamGroup([(cloud.opacity_logits, cloud.g_opacity_logits)],
                             cfg.optim_lr_opacity),
        "color": AdamGroup([(cloud.color_logits, cloud.g_color_logits)],
                           cfg.optim_lr_color),
    }
    if use_illum:
        groups["conv"] = AdamGroup(
            [(conv.w1, conv.g_w1), (conv.b1, conv.g_b1),
             (conv.w2, conv.g_w2), (conv.b2, conv.g_b2)], cfg.optim_lr_conv)
        gamma_groups = [AdamGroup([(gp.value, gp.grad)], cfg.optim_lr_gamma)
                        for gp in gammas]
        field_groups = [AdamGroup([(fl.m, fl.grad)], cfg.optim_lr_illum_map)
                        for fl in fields]

    csv_path = os.path.join(outdir, "losses.csv")
    csv_rows = ["iter,view,total,illum,normal,gradient,mvs,gated_fraction"]
    gated_sum = 0.0
    loss_first = loss_last = None

    for it in range(cfg.train_iterations):
        v = it % n_views
        cam = ds.cams[v]
        i_gt = ds.images[v].data

        out, rcache = rasterize_with_cache(cloud, cam, cfg.train_tile)
        cloud.zero_grad()

        if use_illum:
            gammas[v].zero_grad()
            fields[v].zero_grad()
            conv.zero_grad()
            st = illum_forward(i_gt, ds.ranks[v], out.color.data,
                               gammas[v], conv, fields[v], weights.lam)
            l_illum, per_pixel = st.loss, st.per_pixel
        else:
            l_illum, per_pixel, pcache = _photometric_fwd(
                out.color.data, i_gt, weights.lam)

        if use_normal:
            bits = per_pixel > weights.threshold
            ref = ds.normals[v]
            l_normal, _, _, ncache = _normal_loss_fwd(
                out.normal.data, out.normal.valid, ref.data, ref.valid, bits)
            l_grad, gcache = _gradient_loss_fwd(
                out.normal.data, out.normal.valid, ref.data, ref.valid,
                bits if weights.gate_gradient else None)
            gated_frac = float(bits.mean())
        else:
            l_normal = l_grad = 0.0
            gated_frac = 0.0
        gated_sum += gated_frac

        mvs_now = use_mvs and (it % cfg.train_mvs_interval == 0)
        l_mvs = 0.0
        if mvs_now:
            v2 = (v + 1) % n_views
            out2, rcache2 = rasterize_with_cache(cloud, ds.cams[v2], cfg.train_tile)
            res = mvs_consistency(out.depth.data, out.alpha.data > 0.5, cam,
                                  out2.depth.data, out2.alpha.data > 0.5,
                                  ds.cams[v2])
            l_mvs = res.loss

        losses = {"illum": l_illum, "normal": l_normal, "gradient": l_grad,
                  "mvs": l_mvs}
        if not all(np.isfinite(val) for val in losses.values()):
            _dump_diagnostics(outdir, it, out, losses)
            raise TrainAbort(f"non-finite loss at iteration {it}: {losses}")
        total = total_loss(l_illum, l_normal, l_grad, l_mvs, weights)
        losses["total"] = total
        if loss_first is None:
            loss_first = dict(losses)
        loss_last = dict(losses)

        # ---- backward ----
        if use_illum:
            d_rend = illum_backward(st, weights.w_illum)
        else:
            d_rend, _ = _photometric_bwd(pcache, weights.w_illum)
        d_normal_map = None
        if use_normal:
            d_normal_map = (_normal_loss_bwd(ncache, weights.w_normal)
                            + _gradient_loss_bwd(gcache, weights.w_gradient))
        d_depth_a = None
        if mvs_now and res.informative:
            d_depth_a, d_depth_b = mvs_backward(res, weights.w_mvs)
        rasterize_backward(rcache, d_color=d_rend, d_depth=d_depth_a,
                           d_normal=d_normal_map)
        if mvs_now and res.informative:
            rasterize_backward(rcache2, d_depth=d_depth_b)

        # ---- optimizer ----
        for g in ("position", "log_scale", "rotation", "opacity", "color"):
            groups[g].step()
        cloud.project_constraints()
        if use_illum:
            groups["conv"].step()
            gamma_groups[v].step()
            field_groups[v].step()
            np.maximum(fields[v].m, ILLUM_MAP_FLOOR, out=fields[v].m)

        csv_rows.append(
            f"{it},{v},{total!r},{l_illum!r},{l_normal!r},{l_grad!r},"
            f"{l_mvs!r},{gated_frac!r}")
        if cfg.train_snapshot_interval and it % cfg.train_snapshot_interval == 0:
            write_ppm(out.color, os.path.join(outdir, f"render_{it:06d}.ppm"))

    with open(csv_path, "w") as f:
        f.write("\n".join(csv_rows) + "\n")

    pts = sample_points(cloud, cfg.train_chamfer_samples, seed=cfg.train_seed)
    final_chamfer = chamfer(pts, ds.gt_points)
    save_cloud(cloud, os.path.join(outdir, "checkpoint.gau"))
    if use_illum:
        save_illum_state(os.path.join(outdir, "checkpoint.ill"), gammas, fields, conv)
    export_ply(pts, os.path.join(outdir, "points.ply"))

    report = Report(
        final_chamfer=final_chamfer,
        gated_fraction=gated_sum / cfg.train_iterations,
        iterations=cfg.train_iterations,
        n_views=n_views,
        n_gaussians=len(cloud),
        loss_first=loss_first,
        loss_last=loss_last,
        config=cfg.to_dict(),
        code_version=__version__,
        wall_clock_seconds=time.perf_counter() - t_start,
    )
    with open(os.path.join(outdir, "report.json"), "w") as f:
        f.write(report.to_json(include_timing=False))
    with open(os.path.join(outdir, "timing.json"), "w") as f:
        f.write(json.dumps({"wall_clock_seconds": report.wall_clock_seconds}) + "\n")
    return report


def evaluate_checkpoint(cloud: GaussianCloud, cfg: RunConfig,
                        n_samples=None, seed=None) -> float:
    """Chamfer distance of a checkpointed cloud against the scene's surface."""
    scene = cfg.scene_spec()
    gt = sample_gt_points(scene)
    pts = sample_points(cloud, n_samples or cfg.train_chamfer_samples,
                        seed=cfg.train_seed if seed is None else seed)
    return chamfer(pts, gt)
