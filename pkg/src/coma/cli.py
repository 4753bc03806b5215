"""``coma`` command line.

Every subcommand writes its artifacts under ``--out`` and seeds all randomness from
``--seed``.  Only ``pipeline --live`` talks to the network.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import evalmetrics
from .agents import roles
from .agents.providers import HashEmbedder, LiveProvider, ProviderConfig, ScriptedProvider
from .editops import blend, edit_bodypart, edit_inbetween, frames_to_tokens
from .motiondata import PARTS, MotionSequence, read_motion, synthetic_motion, write_motion
from .orchestrator import Models, Providers, WorkflowConfig, WorkflowError, run_pipeline
from .spamgen import (BaseTrainer, BaseTransformer, GenConfig, ResidualTrainer, ResidualTransformer,
                      TextBundle, generate_base, generate_residuals)
from .spamvq import RvqConfig, RvqTrainer, SpamVQ, TokenGrid, detokenize, tokenize
from .trajedit import apply_trajectory, derive_profile, parse_curve_spec, resample_uniform, sample_curve

logger = logging.getLogger("coma")


class UsageError(Exception):
    pass


@dataclass
class AppConfig:
    out: str = "out"
    models: Optional[str] = None
    transcript: Optional[str] = None
    rvq: RvqConfig = field(default_factory=RvqConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    workflow: WorkflowConfig = field(default_factory=WorkflowConfig)
    provider: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=lambda: {"pool": 32, "k": 1, "repeats": 10})


def _coerce(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return None if raw.strip().lower() in ("", "none") else raw


def _update_dataclass(obj, section, name: str):
    known = {f.name.lower(): f.name for f in dataclasses.fields(obj)}  # configparser lowercases keys
    kw = {}
    for key, raw in section.items():
        if key.lower() not in known:
            raise UsageError(f"[{name}] unknown key {key!r}")
        field_name = known[key.lower()]
        kw[field_name] = _coerce(raw, getattr(obj, field_name))
    return dataclasses.replace(obj, **kw)


def load_config(path: Optional[str]) -> AppConfig:
    """INI file with sections [paths], [rvq], [gen], [workflow], [provider], [metrics]."""
    cfg = AppConfig()
    if path is None:
        return cfg
    if not Path(path).is_file():
        raise UsageError(f"config file {path!r} not found")
    cp = configparser.ConfigParser()
    cp.read(path, encoding="utf-8")
    for name in cp.sections():
        sec = cp[name]
        if name == "paths":
            for key in sec:
                if key not in ("out", "models", "transcript"):
                    raise UsageError(f"[paths] unknown key {key!r}")
                setattr(cfg, key, sec[key])
        elif name in ("rvq", "gen", "workflow"):
            setattr(cfg, name, _update_dataclass(getattr(cfg, name), sec, name))
        elif name == "provider":
            cfg.provider = dict(sec)
        elif name == "metrics":
            cfg.metrics.update({k: int(v) for k, v in sec.items()})
        else:
            raise UsageError(f"unknown config section [{name}]")
    for ref in (cfg.models, cfg.transcript):
        if ref is not None and not Path(ref).exists():
            raise UsageError(f"configured path {ref!r} does not exist")
    return cfg


# ---------------------------------------------------------------- helpers

def _out(args, cfg: AppConfig) -> Path:
    p = Path(args.out or cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _models(args, cfg: AppConfig) -> Models:
    path = args.models or cfg.models
    if path:
        return Models.load(path)
    logger.warning("no --models given; using untrained weights (seed %d)", args.seed)
    gen = dataclasses.replace(cfg.gen, num_codes=cfg.rvq.codes_per_book, rvq_layers=cfg.rvq.num_layers)
    return Models.untrained(args.seed, cfg.rvq, gen)


def _text(prompt: str, local=None) -> TextBundle:
    return TextBundle.from_prompts(HashEmbedder(), prompt, local)


def _load_clips(directory: str) -> List[MotionSequence]:
    files = sorted(Path(directory).glob("*.cma"))
    if not files:
        raise UsageError(f"no .cma files in {directory!r}")
    return [read_motion(f) for f in files]


def _parse_range(text: str):
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise UsageError(f"--range expects ALPHA:BETA frames, got {text!r}") from None


def _parse_parts(text: str) -> List[str]:
    parts = [p.strip().upper() for p in text.split(",") if p.strip()]
    bad = [p for p in parts if p not in PARTS]
    if bad or not parts:
        raise UsageError(f"--parts expects a comma list of {','.join(PARTS)}, got {text!r}")
    return parts


def _write(m: MotionSequence, path: Path) -> None:
    write_motion(m, path)
    print(f"wrote {path} ({m.T} frames)")


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg: AppConfig) -> int:
    out = _out(args, cfg)
    for i in range(args.count):
        m = synthetic_motion(args.seed * 100003 + i, args.frames)
        write_motion(m, out / f"clip_{i:04d}.cma")
    print(f"wrote {args.count} clips to {out}")
    return 0


def cmd_train_rvq(args, cfg: AppConfig) -> int:
    clips = _load_clips(args.data)
    out = _out(args, cfg)
    torch.manual_seed(args.seed)
    vq = SpamVQ(cfg.rvq)
    trainer = RvqTrainer(vq, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    for it in range(args.steps):
        idx = rng.choice(len(clips), size=min(args.batch, len(clips)), replace=False)
        loss = trainer.step([clips[i] for i in idx])
        if (it + 1) % args.log_every == 0 or it + 1 == args.steps:
            print(f"step {it + 1}/{args.steps} loss {loss:.5f} resets {trainer.last_resets}")
    vq.eval()
    placeholder = Models.untrained(args.seed, cfg.rvq, dataclasses.replace(
        cfg.gen, num_codes=cfg.rvq.codes_per_book, rvq_layers=cfg.rvq.num_layers))
    Models(vq, placeholder.base, placeholder.res, placeholder.gen_cfg).save(out)
    print(f"saved models to {out}")
    return 0


def cmd_train_gen(args, cfg: AppConfig) -> int:
    if not args.models:
        raise UsageError("train-gen needs --models with a trained rvq.cmk")
    clips = _load_clips(args.data)
    prev = Models.load(args.models)
    out = _out(args, cfg)
    torch.manual_seed(args.seed)
    gen_cfg = dataclasses.replace(cfg.gen, num_codes=prev.vq.cfg.codes_per_book,
                                  rvq_layers=prev.vq.cfg.num_layers)
    grids = np.stack([tokenize(m, prev.vq).layers for m in clips])
    texts = [_text(m.text or "") for m in clips]
    base = BaseTransformer(gen_cfg)
    res = ResidualTransformer(gen_cfg) if gen_cfg.rvq_layers > 1 else None
    bt = BaseTrainer(base, seed=args.seed)
    rt = ResidualTrainer(res, seed=args.seed + 1) if res is not None else None
    rng = np.random.default_rng(args.seed)
    for it in range(args.steps):
        idx = rng.choice(len(clips), size=min(args.batch, len(clips)), replace=False)
        lb = bt.step(grids[idx], [texts[i] for i in idx])
        lr = rt.step(grids[idx], [texts[i] for i in idx]) if rt is not None else 0.0
        if (it + 1) % args.log_every == 0 or it + 1 == args.steps:
            print(f"step {it + 1}/{args.steps} base {lb:.4f} residual {lr:.4f}")
    Models(prev.vq, base.eval(), res.eval() if res is not None else None, gen_cfg).save(out)
    print(f"saved models to {out}")
    return 0


def cmd_generate(args, cfg: AppConfig) -> int:
    models = _models(args, cfg)
    out = _out(args, cfg)
    n = -(-args.frames // models.downscale)
    text = _text(args.text)
    with torch.no_grad():
        base = generate_base(text, n, models.base, models.gen_cfg, seed=args.seed)
        layers = base[None] if models.res is None else generate_residuals(base, text, models.res,
                                                                          models.gen_cfg)
        grid = TokenGrid(layers, models.gen_cfg.mask_id)
        m = detokenize(grid, models.vq, cfg.workflow.fps, args.text)
    _write(MotionSequence(m.frames[:args.frames], m.fps, m.text), out / "generated.cma")
    return 0


def cmd_edit(args, cfg: AppConfig) -> int:
    models = _models(args, cfg)
    out = _out(args, cfg)
    src = read_motion(args.input)
    grid = tokenize(src, models.vq)
    with torch.no_grad():
        if args.kind == "inbetween":
            if not args.range:
                raise UsageError("edit --kind inbetween needs --range ALPHA:BETA")
            a, b = frames_to_tokens(*_parse_range(args.range), models.downscale)
            new = edit_inbetween(grid, a, b, _text(args.text), models.base, models.res, models.gen_cfg,
                                 args.seed)
        else:
            if not args.parts:
                raise UsageError("edit --kind bodypart needs --parts")
            parts = _parse_parts(args.parts)
            new = edit_bodypart(grid, parts, _text(args.text, {p: args.text for p in parts}), models.base,
                                models.res, args.rho, models.gen_cfg, args.seed)
        m = detokenize(new, models.vq, src.fps, args.text)
    _write(MotionSequence(m.frames[:src.T], m.fps, m.text), out / "edited.cma")
    return 0


def cmd_blend(args, cfg: AppConfig) -> int:
    models = _models(args, cfg)
    out = _out(args, cfg)
    a, b = read_motion(args.a), read_motion(args.b)
    ga, gb = tokenize(a, models.vq), tokenize(b, models.vq)
    with torch.no_grad():
        g = blend(ga, gb, _text(args.text), models.base, models.res, args.n_trans,
                  min(args.n_ctx, ga.n, gb.n), models.gen_cfg, args.seed)
        m = detokenize(g, models.vq, a.fps, args.text)
    _write(m, out / "blended.cma")
    return 0


def cmd_traj(args, cfg: AppConfig) -> int:
    out = _out(args, cfg)
    if args.spec:
        code = Path(args.spec).read_text(encoding="utf-8")
        spec = parse_curve_spec(code)
    else:
        transcript = args.transcript or cfg.transcript
        if not transcript:
            raise UsageError("traj --from-llm needs --transcript")
        code, spec = roles.trajectory_program(args.from_llm, ScriptedProvider.from_file(transcript))
    if args.input:
        base = read_motion(args.input)
        frames = base.T
    else:
        frames = args.frames
        base = MotionSequence(np.zeros((frames, 263), np.float32), cfg.workflow.fps)
    poly = resample_uniform(sample_curve(spec), frames)
    profile = derive_profile(poly, args.speed)
    m = apply_trajectory(base, profile, overwrite_speed=args.input is None)
    _write(m, out / "trajectory.cma")
    (out / "trajectory.json").write_text(json.dumps({
        "closed": poly.is_closed(), "points": poly.points.tolist(), "program": code}), encoding="utf-8")
    print(f"trajectory {'closed' if poly.is_closed() else 'open'}, {len(poly)} points")
    return 0


def cmd_pipeline(args, cfg: AppConfig) -> int:
    out = _out(args, cfg)
    if args.live:
        pc = dict(cfg.provider)
        if args.endpoint:
            pc["endpoint"] = args.endpoint
        if not pc.get("endpoint"):
            raise UsageError("pipeline --live needs --endpoint or [provider] endpoint")
        llm = LiveProvider(ProviderConfig(
            endpoint=pc["endpoint"], model=pc.get("model", "gpt-4o"),
            timeout=float(pc.get("timeout", 60)), max_retries=int(pc.get("max_retries", 3))))
    else:
        transcript = args.transcript or cfg.transcript
        if not transcript:
            raise UsageError("pipeline needs --transcript FILE or --live")
        llm = ScriptedProvider.from_file(transcript)
    torch.manual_seed(args.seed)
    models = _models(args, cfg)
    wf = dataclasses.replace(cfg.workflow, seed=args.seed, review_dir=str(out / "review"))
    if args.K is not None:
        wf = dataclasses.replace(wf, K=args.K)
    if args.jobs is not None:
        wf = dataclasses.replace(wf, jobs=args.jobs)
    if args.no_trajectory:
        wf = dataclasses.replace(wf, enable_trajectory=False)
    try:
        m, trace = run_pipeline(args.prompt, Providers(llm), models, wf)
    except WorkflowError as exc:
        exc.trace.write_jsonl(out / "trace.jsonl")
        raise
    trace.write_jsonl(out / "trace.jsonl")
    _write(m, out / "motion.cma")
    print(" ".join(trace.ops()))
    return 0


def cmd_eval(args, cfg: AppConfig) -> int:
    out = _out(args, cfg)
    a = evalmetrics.load_embeddings(args.a).rows
    b = evalmetrics.load_embeddings(args.b).rows if args.b else None
    pool = args.pool or cfg.metrics["pool"]
    k = args.k or cfg.metrics["k"]
    if args.metric != "multimodality" and b is None:
        raise UsageError(f"--metric {args.metric} needs --b")
    if args.metric == "fid":
        val = evalmetrics.fid(a, b)
    elif args.metric == "mas":
        val = evalmetrics.mean_mas(a, b)
    elif args.metric == "r-precision":
        val = evalmetrics.r_precision(a, b, pool=pool, k=k, seed=args.seed)
    elif args.metric == "mm-dist":
        val = evalmetrics.mm_dist(a, b)
    else:
        r = args.repeats or cfg.metrics["repeats"]
        if a.shape[0] % r:
            raise UsageError(f"{a.shape[0]} rows do not split into groups of {r}")
        val = evalmetrics.multimodality(a.reshape(-1, r, a.shape[1]))
    result = {"metric": args.metric, "value": val}
    (out / f"{args.metric}.json").write_text(json.dumps(result), encoding="utf-8")
    print(json.dumps(result))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file; flags override it")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--models", help="directory with rvq.cmk, base.cmk, res.cmk")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coma", description="Part-aware motion generation and editing.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus")
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--frames", type=int, default=64)
    s.set_defaults(func=cmd_gen_data)

    for name, fn in (("train-rvq", cmd_train_rvq), ("train-gen", cmd_train_gen)):
        s = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]} training")
        s.add_argument("--data", required=True, help="directory of .cma clips")
        s.add_argument("--steps", type=int, default=2000)
        s.add_argument("--batch", type=int, default=8)
        s.add_argument("--log-every", type=int, default=100)
        s.set_defaults(func=fn)

    s = sub.add_parser("generate", parents=[common], help="text to motion")
    s.add_argument("--text", required=True)
    s.add_argument("--frames", type=int, default=80)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("edit", parents=[common], help="in-between or body-part edit")
    s.add_argument("--input", required=True)
    s.add_argument("--kind", choices=("inbetween", "bodypart"), required=True)
    s.add_argument("--range", help="ALPHA:BETA frames (inbetween)")
    s.add_argument("--parts", help="comma list of LU,RU,LL,RL (bodypart)")
    s.add_argument("--rho", type=float, default=0.15)
    s.add_argument("--text", required=True)
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("blend", parents=[common], help="join two motions with a transition")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--n-trans", type=int, default=4)
    s.add_argument("--n-ctx", type=int, default=4)
    s.set_defaults(func=cmd_blend)

    s = sub.add_parser("traj", parents=[common], help="map a curve program onto root motion")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="curve program file")
    src.add_argument("--from-llm", metavar="TEXT", help="trajectory text to send to the scripted LLM")
    s.add_argument("--transcript")
    s.add_argument("--input", help="motion to retarget (default: a still patch)")
    s.add_argument("--frames", type=int, default=196)
    s.add_argument("--speed", type=float, default=0.05, help="mean root speed per frame")
    s.set_defaults(func=cmd_traj)

    s = sub.add_parser("pipeline", parents=[common], help="full agent workflow")
    s.add_argument("--prompt", required=True)
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--transcript")
    mode.add_argument("--live", action="store_true")
    s.add_argument("--endpoint")
    s.add_argument("--K", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--no-trajectory", action="store_true")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("eval", parents=[common], help="embedding metrics")
    s.add_argument("--metric", required=True, choices=("fid", "mas", "r-precision", "mm-dist", "multimodality"))
    s.add_argument("--a", required=True, help="CMK1 embedding file")
    s.add_argument("--b")
    s.add_argument("--pool", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--repeats", type=int)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"coma: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"coma: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
