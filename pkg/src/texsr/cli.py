"""Batch command-line interface: synth, solve, train, eval.

Exit codes: 0 success, 1 numerical failure (non-finite detected),
2 usage/config error, 3 I/O error. Diagnostics go to stderr; commands never
mutate their inputs and are byte-reproducible for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from . import fileio, learn, metrics
from .atlas import build_pullback_lr, extract_patches, init_atlas_average
from .errors import (
    NumericalError,
    ParameterError,
    ParseError,
    StructuralError,
    TexsrError,
    UsageError,
)
from .solver import SolverConfig
from .synth import SceneSpec, gen_texture, load_bundle, render_views, save_bundle

__all__ = ["main", "entry", "RunConfig"]


class RunConfig:
    """Typed view over a run.cfg file ([paths]/[run]/[solver]/[train] sections)."""

    def __init__(self, path):
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        read = parser.read(path)
        if not read:
            raise UsageError(f"config file not found: {path}")
        self._p = parser
        self.scene_dir = Path(self._get("paths", "scene_dir", required=True))
        self.output_dir = Path(self._get("paths", "output_dir", required=True))
        ckpt = self._get("paths", "checkpoint", default="")
        self.checkpoint = Path(ckpt) if ckpt else None
        self.num_views = int(self._get("run", "num_views", default="0"))
        self.seed = int(self._get("run", "seed", default="0"))
        self.factor = int(self._get("run", "factor", default="2"))
        if self.factor not in (2, 4):
            raise ParameterError(f"factor must be 2 or 4, got {self.factor}")
        self.lambda0 = float(self._get("solver", "lambda0", default="0.1"))
        self.solver = SolverConfig(
            eta=float(self._get("solver", "eta", default="0.025")),
            tau=float(self._get("solver", "tau", default="0.025")),
            num_pd_iters=int(self._get("solver", "num_pd_iters", default="400")),
            exact_adjoint_tv=self._getbool("solver", "exact_adjoint_tv", True),
            check_step_bound=self._getbool("solver", "check_step_bound", True),
        )
        self.train = learn.TrainConfig(
            alpha=float(self._get("train", "alpha", default="1.0")),
            learning_rate=float(self._get("train", "learning_rate", default="1e-4")),
            batch_size=int(self._get("train", "batch_size", default="4")),
            epochs=int(self._get("train", "epochs", default="1")),
            seed=int(self._get("train", "seed", default="0")),
        )
        self.train_stride = int(self._get("train", "stride", default="32"))
        self.train_iters = int(self._get("train", "num_pd_iters", default="50"))
        self.eval_output = self._get("eval", "output", default="")

    def _get(self, section, key, default=None, required=False):
        if self._p.has_option(section, key):
            return self._p.get(section, key)
        if required:
            raise UsageError(f"missing [{section}] {key} in run config")
        return default

    def _getbool(self, section, key, default):
        if self._p.has_option(section, key):
            return self._p.getboolean(section, key)
        return default


def _require_dir(path: Path, what: str):
    if not path.is_dir():
        raise UsageError(f"{what} does not exist: {path}")


def _scene_spec_from_cfg(cfg: dict) -> SceneSpec:
    n = int(cfg.get("num_views", "8"))
    if "sigma" in cfg:
        sigma = float(cfg["sigma"])
    else:
        sigma = tuple(float(cfg[f"sigma_{i:03d}"]) for i in range(n))
    return SceneSpec(
        tex_dims=(int(cfg.get("height", "64")), int(cfg.get("width", "64"))),
        num_views=n,
        factor=int(cfg.get("factor", "2")),
        sigma_true=sigma,
        noise_std=float(cfg.get("noise_std", "0.005")),
        max_translation_px=float(cfg.get("max_translation_px", "1.5")),
        max_rotation_deg=float(cfg.get("max_rotation_deg", "0.5")),
        max_skew=float(cfg.get("max_skew", "1e-6")),
        flow_amplitude=float(cfg.get("flow_amplitude", "0.0")),
        texture_kind=cfg.get("texture", "mixed"),
        seed=int(cfg.get("seed", "0")),
    )


def cmd_synth(cfg_path: str) -> int:
    cfg_file = Path(cfg_path)
    if not cfg_file.is_file():
        raise UsageError(f"scene config not found: {cfg_file}")
    cfg = fileio.read_keyvalue(cfg_file)
    if "output_dir" not in cfg:
        raise UsageError("scene config must set output_dir")
    spec = _scene_spec_from_cfg(cfg)
    texture = gen_texture(spec.texture_kind, spec.tex_dims, spec.seed)
    gt = render_views(texture, spec)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    save_bundle(out, gt)
    print(f"scene bundle written to {out}")
    return 0


def _load_scene_subset(run: RunConfig):
    _require_dir(run.scene_dir, "scene directory")
    scene = load_bundle(run.scene_dir)
    if scene.factor != run.factor:
        raise UsageError(
            f"run config factor {run.factor} does not match the scene's "
            f"factor {scene.factor}")
    views, chains = list(scene.views), list(scene.chains)
    sigmas = list(scene.sigmas)
    if run.num_views > 0:
        views = views[: run.num_views]
        chains = chains[: run.num_views]
        sigmas = sigmas[: run.num_views]
    if not views:
        raise UsageError("scene has no views after selection")
    return scene, views, chains, sigmas


def _params_for_solve(run: RunConfig, tex_shape, sigmas):
    if run.checkpoint is not None:
        if not run.checkpoint.is_file():
            raise UsageError(f"checkpoint not found: {run.checkpoint}")
        params, _ = learn.load_checkpoint(run.checkpoint)
        if params.lambda_raw.shape != tuple(tex_shape):
            raise UsageError(
                f"checkpoint weight map {params.lambda_raw.shape} does not match "
                f"the scene texture {tuple(tex_shape)}")
        if params.sigma_raw.size != len(sigmas):
            raise UsageError("checkpoint has a different number of views")
        return params
    return learn.init_params(tex_shape, sigmas, lam_init=run.lambda0, seed=run.seed)


def _write_reports(out: Path, name: str, report: metrics.MetricReport):
    (out / "report.txt").write_text(report.line(name) + "\n", encoding="utf-8")
    (out / "report.json").write_text(report.to_json(name) + "\n", encoding="utf-8")


def cmd_solve(cfg_path: str) -> int:
    run = RunConfig(cfg_path)
    scene, views, chains, sigmas = _load_scene_subset(run)
    run_dirname = run.output_dir
    run_dirname.mkdir(parents=True, exist_ok=True)

    pullbacks = [build_pullback_lr(c, v.visibility) for v, c in zip(views, chains)]
    init = init_atlas_average(views, pullbacks, chains[0].tex_shape)
    params = _params_for_solve(run, init.data.shape, sigmas)
    t_hat, t_mva, _ = learn.run_pipeline(init.data, views, chains, params,
                                         run.solver, valid_mask=init.mask)
    result = np.clip(t_hat, 0.0, 1.0)
    fileio.write_pfm(run_dirname / "texture_sr.pfm", result)
    fileio.write_png(run_dirname / "texture_sr.png", result)
    report = metrics.evaluate(result, scene.texture.data, init.mask)
    _write_reports(run_dirname, "solve", report)
    print(report.line("solve"))
    return 0


def cmd_train(cfg_path: str) -> int:
    run = RunConfig(cfg_path)
    scene, views, chains, sigmas = _load_scene_subset(run)
    run.output_dir.mkdir(parents=True, exist_ok=True)

    pullbacks = [build_pullback_lr(c, v.visibility) for v, c in zip(views, chains)]
    init = init_atlas_average(views, pullbacks, chains[0].tex_shape)
    patches = extract_patches(init, views, chains, factor=scene.factor,
                              stride=run.train_stride)
    if patches.warning:
        print(f"warning: {patches.warning}", file=sys.stderr)
    if not patches.patches:
        raise UsageError("no trainable patches in the scene")
    samples = []
    for patch in patches.patches:
        oy, ox = patch.offset
        ps = patch.tex.shape[0]
        samples.append(learn.TrainSample(
            patch=patch, target=scene.texture.data[oy:oy + ps, ox:ox + ps]))

    params = learn.init_params(init.data.shape, sigmas, lam_init=run.lambda0,
                               seed=run.seed)
    state = learn.fresh_adam_state(params)
    solver_cfg = SolverConfig(eta=run.solver.eta, tau=run.solver.tau,
                              num_pd_iters=run.train_iters,
                              exact_adjoint_tv=run.solver.exact_adjoint_tv)
    log_lines = []
    for epoch in range(run.train.epochs):
        params, state, terms = learn.train_epoch(samples, params, state, run.train,
                                                 solver_cfg, np.asarray(sigmas),
                                                 epoch=epoch)
        learn.save_checkpoint(run.output_dir / f"checkpoint_{epoch:03d}.tsrc",
                              params, state)
        line = (f"epoch {epoch} data_l1 {terms.data_l1:.6f} "
                f"sigma_reg {terms.sigma_reg:.6f} total {terms.total:.6f}")
        log_lines.append(line)
        print(line)
    (run.output_dir / "train_log.txt").write_text("\n".join(log_lines) + "\n",
                                                  encoding="utf-8")
    return 0


def cmd_eval(cfg_path: str) -> int:
    run = RunConfig(cfg_path)
    if not run.eval_output:
        raise UsageError("eval needs [eval] output = <texture pfm>")
    out_file = Path(run.eval_output)
    if not out_file.is_file():
        raise UsageError(f"output texture not found: {out_file}")
    scene, views, chains, _ = _load_scene_subset(run)
    result = fileio.read_pfm(out_file)
    if result.ndim != 2 or result.shape != scene.texture.data.shape:
        raise StructuralError("evaluated raster does not match the scene texture")
    pullbacks = [build_pullback_lr(c, v.visibility) for v, c in zip(views, chains)]
    init = init_atlas_average(views, pullbacks, chains[0].tex_shape)
    run.output_dir.mkdir(parents=True, exist_ok=True)
    report = metrics.evaluate(result, scene.texture.data, init.mask)
    _write_reports(run.output_dir, out_file.stem, report)
    print(report.line(out_file.stem))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="texsr",
        description="multi-view texture super-resolution batch commands")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("synth", "generate a synthetic scene bundle"),
                            ("solve", "reconstruct a texture from a scene bundle"),
                            ("train", "fit solver parameters on a scene bundle"),
                            ("eval", "score a reconstructed texture")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="configuration file")
    args = parser.parse_args(argv)
    handlers = {"synth": cmd_synth, "solve": cmd_solve,
                "train": cmd_train, "eval": cmd_eval}
    try:
        return handlers[args.command](args.config)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 1
    except ParseError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except (UsageError, ParameterError, StructuralError, TexsrError,
            configparser.Error, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())
