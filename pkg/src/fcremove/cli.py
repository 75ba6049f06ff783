"""Command-line entry point: gen-data, init-config, train-teacher, distill, infer, report.

A run is described by a plain-text ``key = value`` config file (see
``RunConfig``). Relative paths in it resolve against the config file's
directory. Every command writes a tab-separated log whose first field is a
record-type tag; logs carry no timestamps, so identical inputs give identical
bytes.

Exit codes: 0 ok, 2 usage, 3 config error, 4 data or checkpoint error,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .flops import parse_kv
from .fpac import CacheConfig, MaskPolicy, run_cached_inference
from .metrics import get_backend, perceptual, psnr, psnr_mask
from .model import CACHE_SITES, NumericFault, UNetConfig
from .rad import (DistillConfig, DistillState, LossWeights, TeacherConfig, TeacherState, distill, load_generator,
                  train_teacher)
from .scheduler import make_schedule, make_timestep_plan
from .synthgen import CorpusConfig, CorpusError, generate_corpus, read_corpus, write_corpus

log = logging.getLogger("fcremove")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class RunConfig:
    root_seed: int = 0
    corpus: str = "train.fcs"
    eval_corpus: str = "heldout.fcs"
    out_dir: str = "run"
    teacher_ckpt: str = "teacher.ckpt"
    student_ckpt: str = "student.ckpt"
    # noise schedule
    schedule: str = "linear"
    total_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # plans
    teacher_steps: int = 20
    student_steps: int = 4
    # network
    widths: tuple[int, ...] = (32, 64, 128)
    d_model: int = 64
    heads: int = 4
    time_dim: int = 128
    prediction: str = "x0"
    # teacher
    teacher_iterations: int = 2000
    teacher_batch: int = 8
    teacher_lr: float = 3e-4
    teacher_lambda_mask: float = 0.1
    # distillation
    distill_iterations: int = 300
    distill_batch: int = 8
    lr_g: float = 1e-5
    lr_d: float = 1e-5
    weight_decay: float = 0.01
    lambda_diff: float = 1.0
    lambda_lpips: float = 5.0
    lambda_gan: float = 0.5
    lambda_mask: float = 0.01
    perceptual_loss: str = "pyramid"
    # caching
    cache_layers: tuple[str, ...] = CACHE_SITES
    cache_step: int = 0  # 0 = last step
    mask_policy: str = "quantile"
    mask_q: float = 0.85
    mask_radius: int = 1
    map_site: str = "down.1"
    # evaluation
    perceptual_metric: str = "none"
    checkpoint_every: int = 100

    def validate(self) -> None:
        if self.schedule not in ("linear", "scaled_linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        for name in ("teacher_steps", "student_steps", "total_steps", "teacher_batch", "distill_batch",
                     "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.teacher_iterations < 0 or self.distill_iterations < 0:
            raise ConfigError("iteration counts must be >= 0")
        if len(self.widths) != 3:
            raise ConfigError("widths needs exactly three entries")
        try:
            self.unet()
            self.cache()
            self.weights()
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def unet(self) -> UNetConfig:
        return UNetConfig(widths=tuple(self.widths), d_model=self.d_model, heads=self.heads,
                          time_dim=self.time_dim, cond_dim=self.d_model, prediction=self.prediction,
                          schedule=self.schedule, total_steps=self.total_steps, beta_start=self.beta_start,
                          beta_end=self.beta_end)

    def weights(self) -> LossWeights:
        return LossWeights(lambda_diff=self.lambda_diff, lambda_lpips=self.lambda_lpips, lambda_gan=self.lambda_gan,
                           lambda_mask=self.lambda_mask)

    def cache(self, enabled: bool = True) -> CacheConfig:
        return CacheConfig(layers=tuple(self.cache_layers) if enabled else (),
                           step=self.cache_step or None,
                           policy=MaskPolicy(self.mask_policy, self.mask_q, self.mask_radius),
                           map_site=self.map_site)

    def teacher_cfg(self) -> TeacherConfig:
        return TeacherConfig(iterations=self.teacher_iterations, batch_size=self.teacher_batch,
                             lr=self.teacher_lr, lambda_mask=self.teacher_lambda_mask, map_site=self.map_site,
                             seed=derive_seed(self.root_seed, "teacher"))

    def distill_cfg(self) -> DistillConfig:
        return DistillConfig(iterations=self.distill_iterations, batch_size=self.distill_batch, lr_g=self.lr_g,
                             lr_d=self.lr_d, weight_decay=self.weight_decay, map_site=self.map_site,
                             perceptual=self.perceptual_loss, seed=derive_seed(self.root_seed, "distill"))

    def sched(self):
        return make_schedule(self.schedule, self.total_steps, self.beta_start, self.beta_end)


def derive_seed(root: int, label: str) -> int:
    """Independent 63-bit seed for a named subsystem."""
    digest = hashlib.sha256(f"{root}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if default and isinstance(default[0], int):
            return tuple(int(x) for x in items)
        return tuple(items)
    if isinstance(default, bool):
        if raw not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw == "true"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def dump_config(cfg: RunConfig) -> str:
    lines = [f"version = {CONFIG_VERSION}"]
    for f in fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, overrides: Optional[list[str]] = None) -> RunConfig:
    base = RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    values: dict = {}
    version = None
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            entries.append((f"line {lineno}", line))
    entries += [("--set", o) for o in overrides or []]
    for where, line in entries:
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "version":
            version = raw
            continue
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            values[key] = _parse_value(raw, known[key])
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc
    if version is not None and version != str(CONFIG_VERSION):
        raise ConfigError(f"unsupported config version {version} (expected {CONFIG_VERSION})")
    cfg = replace(base, **values)
    cfg.validate()
    return cfg


@dataclass
class Run:
    cfg: RunConfig
    root: Path

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.root / q

    @property
    def out(self) -> Path:
        d = self.path(self.cfg.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        return d


def load_run(config: Optional[str], overrides: Optional[list[str]]) -> Run:
    if config is None:
        return Run(parse_config("", overrides), Path.cwd())
    p = Path(config)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return Run(parse_config(text, overrides), p.resolve().parent)


# ---------------------------------------------------------------------------
# Logs


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def tsv(tag: str, *items) -> str:
    return "\t".join([tag] + [_fmt(x) for x in items])


def kv_row(tag: str, d: dict) -> str:
    return "\t".join([tag] + [f"{k}={_fmt(v)}" for k, v in d.items()])


def write_lines(path: Path, lines: list[str]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_tsv(path: Path) -> list[list[str]]:
    return [line.split("\t") for line in path.read_text().splitlines() if line]


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_corpus(path: Path):
    try:
        return read_corpus(path)
    except FileNotFoundError as exc:
        raise DataError(f"corpus not found: {path}") from exc
    except CorpusError as exc:
        raise DataError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    cc = CorpusConfig(image_size=args.image_size, shadow_prob=args.shadow_prob,
                      reflection_prob=args.reflection_prob, texture=args.texture, count=args.count)
    try:
        cc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    scenes = generate_corpus(range(args.seed, args.seed + args.count), cc)
    try:
        write_corpus(scenes, args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_init_config(args) -> int:
    cfg = parse_config("", args.set)
    Path(args.out).write_text(dump_config(cfg))
    print(f"wrote {args.out}")
    return EXIT_OK


def _train_log(run: Run, name: str, header: list[str], history: list[dict]) -> None:
    lines = list(header)
    lines += [kv_row("step", dict(sorted(h.items()))) for h in history]  # order survives a resume
    write_lines(run.out / name, lines)


def cmd_train_teacher(args) -> int:
    run = load_run(args.config, args.set)
    cfg = run.cfg
    corpus_path = run.path(cfg.corpus)
    corpus = _read_corpus(corpus_path)
    if not corpus:
        raise DataError("training corpus is empty")
    digest = _digest(corpus_path)
    ck = run.path(cfg.teacher_ckpt)
    tcfg = cfg.teacher_cfg()
    state = None
    if args.resume and ck.exists():
        state = TeacherState.load(ck)
        if state.model.cfg != cfg.unet():
            raise DataError(f"{ck}: network config differs from the run config")
        meta = ckpt.load_container(ck)[1]
        if meta.get("corpus_sha256") != digest:
            raise DataError(f"{ck} was trained on a different corpus")
    header = [tsv("config", "command", "train-teacher"), tsv("config", "corpus_sha256", digest)]
    header += [tsv("config", k, v) for k, v in sorted(vars(tcfg).items())]
    extra = {"corpus_sha256": digest}
    sched = cfg.sched()
    state = state or TeacherState.create(cfg.unet(), tcfg)
    while state.iteration < tcfg.iterations:
        stop = min(tcfg.iterations, (state.iteration // cfg.checkpoint_every + 1) * cfg.checkpoint_every)
        if args.until is not None:
            stop = min(stop, args.until)
        if stop <= state.iteration:
            break
        train_teacher(corpus, state.model.cfg, sched, tcfg, state=state, until=stop,
                      dump_path=str(run.out / "teacher_diverged.ckpt"))
        state.save(ck, extra)
        _train_log(run, "teacher.log", header, state.history)
    if not ck.exists():
        state.save(ck, extra)
        _train_log(run, "teacher.log", header, state.history)
    print(f"teacher at iteration {state.iteration}: {ck}")
    return EXIT_OK


def cmd_distill(args) -> int:
    run = load_run(args.config, args.set)
    cfg = run.cfg
    corpus_path = run.path(cfg.corpus)
    corpus = _read_corpus(corpus_path)
    if not corpus:
        raise DataError("training corpus is empty")
    digest = _digest(corpus_path)
    tk, sk = run.path(cfg.teacher_ckpt), run.path(cfg.student_ckpt)
    if not tk.exists():
        raise DataError(f"teacher checkpoint not found: {tk}")
    t_meta = ckpt.load_container(tk)[1]
    if t_meta.get("corpus_sha256") != digest:
        raise DataError(f"{tk} was trained on a different corpus")
    dcfg = cfg.distill_cfg()
    weights = cfg.weights()
    if args.resume and sk.exists():
        state = DistillState.load(sk)
        if ckpt.load_container(sk)[1].get("corpus_sha256") != digest:
            raise DataError(f"{sk} was trained on a different corpus")
    else:
        state = DistillState.from_teacher(load_generator(tk), dcfg)
    plan = make_timestep_plan(cfg.student_steps, cfg.total_steps)
    lpips_fn = get_backend(dcfg.perceptual)
    header = [tsv("config", "command", "distill"), tsv("config", "corpus_sha256", digest),
              tsv("config", "plan", ",".join(str(t) for t in plan.taus)),
              kv_row("weights", {"lambda_diff": weights.lambda_diff, "lambda_lpips": weights.lambda_lpips,
                                 "lambda_gan": weights.lambda_gan, "lambda_mask": weights.lambda_mask})]
    header += [tsv("config", k, v) for k, v in sorted(vars(dcfg).items())]
    extra = {"corpus_sha256": digest, "plan": list(plan.taus)}
    sched = cfg.sched()
    while state.iteration < dcfg.iterations:
        stop = min(dcfg.iterations, (state.iteration // cfg.checkpoint_every + 1) * cfg.checkpoint_every)
        if args.until is not None:
            stop = min(stop, args.until)
        if stop <= state.iteration:
            break
        distill(corpus, state, sched, plan, weights, dcfg, until=stop, lpips_fn=lpips_fn)
        state.save(sk, extra)
        _train_log(run, "distill.log", header, state.history)
    if not sk.exists():
        state.save(sk, extra)
        _train_log(run, "distill.log", header, state.history)
    print(f"student at iteration {state.iteration}: {sk}")
    return EXIT_OK


def cmd_infer(args) -> int:
    run = load_run(args.config, args.set)
    cfg = run.cfg
    ck = run.path(cfg.teacher_ckpt if args.model == "teacher" else cfg.student_ckpt)
    if not ck.exists():
        raise DataError(f"checkpoint not found: {ck}")
    try:
        model = load_generator(ck)
    except ckpt.CheckpointError as exc:
        raise DataError(str(exc)) from exc
    scenes = _read_corpus(run.path(cfg.eval_corpus))
    if args.limit is not None:
        scenes = scenes[: args.limit]
    steps = args.steps or (cfg.teacher_steps if args.model == "teacher" else cfg.student_steps)
    plan = make_timestep_plan(steps, cfg.total_steps)
    cache_on = args.cache == "on"
    try:
        cache_cfg = cfg.cache(enabled=cache_on)
        if cache_cfg.enabled:
            cache_cfg.cached_step(plan)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    name = args.name or f"{args.model}-{steps}-cache{args.cache}"
    out = run.out / f"infer-{name}"
    out.mkdir(parents=True, exist_ok=True)
    sched = cfg.sched()
    seed = derive_seed(cfg.root_seed, "infer")
    lines = [tsv("config", "model", args.model), tsv("config", "checkpoint_sha256", _digest(ck)),
             tsv("config", "steps", steps), tsv("config", "plan", ",".join(str(t) for t in plan.taus)),
             tsv("config", "cache", args.cache), tsv("config", "layers", ",".join(cache_cfg.layers)),
             tsv("config", "fuse", args.fuse)]
    images, rows, flops_kv, maps = [], [], None, {}
    for j, s in enumerate(scenes):
        res = run_cached_inference(model, s, plan, cache_cfg, sched, root_seed=seed, fuse=args.fuse == "on")
        img = res.image.permute(1, 2, 0).numpy()
        pred = res.prediction.permute(1, 2, 0).numpy()
        perc = perceptual(img, s.gt_background, "masked-crop", s.m_obj_eff, backend=cfg.perceptual_metric)
        row = {"psnr": psnr(img, s.gt_background), "psnr_mask": psnr_mask(img, s.gt_background, s.m_obj_eff),
               "psnr_mask_pred": psnr_mask(pred, s.gt_background, s.m_obj_eff),
               "psnr_mask_input": psnr_mask(s.image, s.gt_background, s.m_obj_eff),
               "perceptual_local": perc.value, "flops": res.flops.total}
        for layer, tm in sorted(res.cached_masks.items()):
            row[f"fg.{layer}"] = f"{tm.n_foreground}/{tm.n_tokens}"
        if res.exact:
            row["cache_exact"] = all(res.exact.values())
        lines.append(kv_row("scene", {"id": s.seed, **row}))
        rows.append(row)
        images.append(img)
        if flops_kv is None:
            flops_kv = res.flops.to_kv()
        if j < args.dump_maps:
            g = model.cfg.site_grid(cache_cfg.map_site)
            maps[f"scene{s.seed}"] = np.stack(
                [r.visual_column(cache_cfg.map_site)[0].reshape(g, g).numpy() for r in res.history])
    if not scenes:
        raise DataError("evaluation corpus is empty")
    agg = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "psnr_mask", "psnr_mask_pred", "psnr_mask_input")}
    lines.append(kv_row("aggregate", {"n": len(scenes), **agg}))
    lines += [tsv("flops", *line.split("=", 1)) for line in flops_kv.splitlines()]
    write_lines(out / "metrics.tsv", lines)
    (out / "flops.kv").write_text(flops_kv + "\n")
    np.save(out / "images.npy", np.stack(images).astype(np.float32))
    if maps:
        np.savez(out / "maps.npz", **maps)
    print(f"{name}: n={len(scenes)} psnr={agg['psnr']:.3f} psnr_mask={agg['psnr_mask']:.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    if not root.is_dir():
        raise DataError(f"run directory not found: {root}")
    runs = sorted(p for p in root.glob("infer-*") if (p / "metrics.tsv").exists())
    if not runs:
        print("no runs")
        return EXIT_OK
    lines = [tsv("header", "run", "n", "psnr", "psnr_mask", "psnr_mask_pred", "psnr_mask_input", "flops")]
    for p in runs:
        rows = read_tsv(p / "metrics.tsv")
        agg = dict(kv.split("=", 1) for kv in next(r for r in rows if r[0] == "aggregate")[1:])
        flops = parse_kv((p / "flops.kv").read_text())
        name = p.name[len("infer-"):]
        lines.append(tsv("run", name, agg["n"], agg["psnr"], agg["psnr_mask"], agg["psnr_mask_pred"],
                         agg["psnr_mask_input"], flops["total"]))
        if (p / "maps.npz").exists():
            _write_maps(p / "maps.npz", p / "maps")
    write_lines(root / "report.tsv", lines)
    for line in lines:
        print(line)
    return EXIT_OK


def _write_maps(src: Path, dst: Path) -> None:
    from PIL import Image

    dst.mkdir(exist_ok=True)
    with np.load(src) as data:
        for key in sorted(data.files):
            for step, amap in enumerate(data[key], 1):
                peak = amap.max()
                norm = amap / peak if peak > 0 else amap
                img = Image.fromarray((np.clip(norm, 0, 1) * 255).round().astype(np.uint8))
                img.resize((amap.shape[1] * 8, amap.shape[0] * 8), Image.NEAREST).save(dst / f"{key}_step{step}.png")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcremove", description="Few-step object removal toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic scene corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=512)
    g.add_argument("--out", required=True)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--shadow-prob", type=float, default=0.7)
    g.add_argument("--reflection-prob", type=float, default=0.3)
    g.add_argument("--texture", default="mixed", choices=("gradient", "stripes", "mixed"))
    g.set_defaults(fn=cmd_gen_data)

    c = sub.add_parser("init-config", help="write a default run config")
    c.add_argument("--out", required=True)
    c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    c.set_defaults(fn=cmd_init_config)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    t = sub.add_parser("train-teacher", help="train the multi-step teacher")
    common(t)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--until", type=int, help="stop after this iteration (for staged runs)")
    t.set_defaults(fn=cmd_train_teacher)

    d = sub.add_parser("distill", help="distill the few-step student")
    common(d)
    d.add_argument("--resume", action="store_true")
    d.add_argument("--until", type=int)
    d.set_defaults(fn=cmd_distill)

    i = sub.add_parser("infer", help="run removal on the evaluation corpus")
    common(i)
    i.add_argument("--model", choices=("student", "teacher"), default="student")
    i.add_argument("--steps", type=int)
    i.add_argument("--cache", choices=("on", "off"), default="off")
    i.add_argument("--fuse", choices=("on", "off"), default="on")
    i.add_argument("--limit", type=int)
    i.add_argument("--dump-maps", type=int, default=0, metavar="K", help="save per-step maps for the first K scenes")
    i.add_argument("--name")
    i.set_defaults(fn=cmd_infer)

    r = sub.add_parser("report", help="aggregate infer runs in a run directory")
    r.add_argument("run_dir")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ckpt.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFault as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
