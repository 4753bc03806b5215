"""Plan -> generate -> edit -> review/correct -> trajectory -> blend, with an event trace."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .agents import roles
from .agents.parsers import CorrectionInstruction, PlanSegment
from .agents.providers import HashEmbedder, ScriptedProvider
from .agents.review import render_for_review
from .checkpoint import load_module_state, load_tensors, save_module
from .editops import DEFAULT_N_CTX, DEFAULT_N_TRANS, DEFAULT_RHO, blend, edit_bodypart
from .motiondata import DEFAULT_FPS, PARTS, MotionSequence, mean_root_speed
from .spamgen import (BaseTransformer, GenConfig, ResidualTransformer, TextBundle, generate_base,
                      generate_residuals)
from .spamvq import RvqConfig, SpamVQ, TokenGrid, config_dict, detokenize
from .trajedit import (TrajectoryProfile, apply_trajectory, derive_profile, resample_uniform,
                       sample_curve)

logger = logging.getLogger(__name__)

FRAME_CAP = 196
DEFAULT_DURATION_S = 4.0

# local-edit body part -> token row
EDIT_PARTS = {"left arm": "LU", "right arm": "RU", "left leg": "LL", "right leg": "RL"}


class WorkflowError(RuntimeError):
    def __init__(self, msg: str, trace: "WorkflowTrace"):
        super().__init__(msg)
        self.trace = trace


@dataclass
class WorkflowConfig:
    K: int = 1
    fps: float = DEFAULT_FPS
    enable_trajectory: bool = True
    n_trans: int = DEFAULT_N_TRANS
    n_ctx: int = DEFAULT_N_CTX
    rho: float = DEFAULT_RHO
    seed: int = 0
    default_duration_s: float = DEFAULT_DURATION_S
    frame_cap: int = FRAME_CAP
    review_dir: Optional[str] = None
    jobs: int = 1

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


@dataclass
class Providers:
    llm: object
    vlm: Optional[object] = None
    embedder: object = field(default_factory=HashEmbedder)

    @property
    def captioner(self):
        return self.vlm if self.vlm is not None else self.llm


@dataclass
class Models:
    vq: SpamVQ
    base: BaseTransformer
    res: Optional[ResidualTransformer]
    gen_cfg: GenConfig

    @classmethod
    def untrained(cls, seed: int = 0, rvq_cfg: Optional[RvqConfig] = None,
                  gen_cfg: Optional[GenConfig] = None) -> "Models":
        """Seeded random weights; useful for wiring checks, not for quality."""
        rvq_cfg = rvq_cfg or RvqConfig()
        gen_cfg = gen_cfg or GenConfig(num_codes=rvq_cfg.codes_per_book, rvq_layers=rvq_cfg.num_layers)
        torch.manual_seed(seed)
        vq = SpamVQ(rvq_cfg).eval()
        for p in PARTS:
            for book in vq.books[p]:
                book.vectors.normal_(0.0, 1.0)
                book.initialized.fill_(1.0)
        base = BaseTransformer(gen_cfg).eval()
        res = ResidualTransformer(gen_cfg).eval() if gen_cfg.rvq_layers > 1 else None
        return cls(vq, base, res, gen_cfg)

    @property
    def downscale(self) -> int:
        return self.vq.cfg.downscale

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_module(d / "rvq.cmk", self.vq, {"rvq": config_dict(self.vq.cfg)})
        save_module(d / "base.cmk", self.base, {"gen": config_dict(self.gen_cfg)})
        if self.res is not None:
            save_module(d / "res.cmk", self.res, {"gen": config_dict(self.gen_cfg)})

    @classmethod
    def load(cls, directory) -> "Models":
        d = Path(directory)
        tensors, meta = load_tensors(d / "rvq.cmk")
        vq = SpamVQ(RvqConfig(**meta["rvq"]))
        load_module_state(vq, tensors)
        tensors, meta = load_tensors(d / "base.cmk")
        gen_cfg = GenConfig(**meta["gen"])
        base = BaseTransformer(gen_cfg)
        load_module_state(base, tensors)
        res = None
        if (d / "res.cmk").exists():
            res = ResidualTransformer(gen_cfg)
            load_module_state(res, load_tensors(d / "res.cmk")[0])
        return cls(vq.eval(), base.eval(), res.eval() if res is not None else None, gen_cfg)


# ---------------------------------------------------------------- trace

def digest(obj) -> str:
    """64-bit content hash (hex)."""
    h = hashlib.blake2b(digest_size=8)
    _feed(h, obj)
    return h.hexdigest()


def _feed(h, obj) -> None:
    if isinstance(obj, TokenGrid):
        _feed(h, obj.layers)
    elif isinstance(obj, MotionSequence):
        _feed(h, obj.frames)
    elif isinstance(obj, np.ndarray):
        h.update(f"nd{obj.dtype.str}{obj.shape}".encode())
        h.update(np.ascontiguousarray(obj).tobytes())
    elif isinstance(obj, (list, tuple)):
        h.update(b"[")
        for x in obj:
            _feed(h, x)
            h.update(b",")
        h.update(b"]")
    elif isinstance(obj, dict):
        _feed(h, sorted(obj.items(), key=lambda kv: str(kv[0])))
    elif hasattr(obj, "__dataclass_fields__"):
        _feed(h, {k: getattr(obj, k) for k in obj.__dataclass_fields__})
    else:
        h.update(repr(obj).encode("utf-8"))


@dataclass(frozen=True)
class TraceEvent:
    agent: str
    op: str
    inputs: str
    outputs: str
    round: int = 0
    segment: Optional[int] = None

    def to_json(self) -> dict:
        return {"agent": self.agent, "op": self.op, "segment": self.segment, "round": self.round,
                "inputs": self.inputs, "outputs": self.outputs}


class WorkflowTrace:
    """Append-only event log."""

    def __init__(self):
        self._events: List[TraceEvent] = []
        self._lock = threading.Lock()

    def record(self, agent: str, op: str, inputs, outputs, round: int = 0,
               segment: Optional[int] = None) -> None:
        ev = TraceEvent(agent, op, digest(inputs), digest(outputs), round, segment)
        with self._lock:
            self._events.append(ev)

    def extend(self, events: Iterable[TraceEvent]) -> None:
        with self._lock:
            self._events.extend(events)

    @property
    def events(self) -> Tuple[TraceEvent, ...]:
        with self._lock:
            return tuple(self._events)

    def ops(self) -> List[str]:
        return [e.op for e in self.events]

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev.to_json(), sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path) -> "WorkflowTrace":
        tr = WorkflowTrace()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                d = json.loads(line)
                tr._events.append(TraceEvent(d["agent"], d["op"], d["inputs"], d["outputs"],
                                             d["round"], d["segment"]))
        return tr


# ---------------------------------------------------------------- trace checker

_OP_LETTER = {"Rewrite": "R", "Segment": "S", "Decompose": "D", "Generate": "G", "Edit": "E",
              "Render": "V", "Caption": "C", "Instruct": "I", "TrajGenerate": "T", "TrajMap": "M",
              "Blend": "B"}


class TraceViolation(ValueError):
    pass


def _segment_regex(K: int) -> str:
    if K == 0:
        loop = ""
    else:
        loop = f"(?:(?:VCIE){{0,{K}}}|(?:VCIE){{0,{K - 1}}}VCI)"
    return f"DGE?{loop}(?:TM)?"


def check_trace(trace, K: int, traj_segments: Optional[Iterable[int]] = None) -> None:
    """Raise TraceViolation unless the op sequence follows the workflow:
    Rewrite, Segment, then per segment Decompose, Generate, optional Edit, at most K
    review rounds (Render, Caption, Instruct, then Edit unless the instruction was
    empty, which ends the loop), optional TrajGenerate+TrajMap; finally one Blend."""
    events = trace.events if isinstance(trace, WorkflowTrace) else tuple(trace)
    try:
        letters = "".join(_OP_LETTER[e.op] for e in events)
    except KeyError as exc:
        raise TraceViolation(f"unknown op {exc.args[0]!r}") from None
    seg = _segment_regex(K)
    if not re.fullmatch(f"RS(?:{seg})+B", letters):
        raise TraceViolation(f"op sequence {letters!r} does not follow the workflow (K={K})")
    # segment bookkeeping: each Decompose opens the next segment index
    current = None
    seen = []
    for e in events:
        if e.op == "Decompose":
            current = e.segment
            if current in seen or (seen and current != seen[-1] + 1) or (not seen and current != 0):
                raise TraceViolation(f"segment {current} out of order")
            seen.append(current)
        elif e.op not in ("Rewrite", "Segment", "Blend") and e.segment != current:
            raise TraceViolation(f"{e.op} tagged with segment {e.segment} inside segment {current}")
    rounds: Dict[int, List[int]] = {}
    for e in events:
        if e.op == "Render":
            rounds.setdefault(e.segment, []).append(e.round)
    for s, rs in rounds.items():
        if rs != list(range(1, len(rs) + 1)):
            raise TraceViolation(f"segment {s}: review rounds {rs} are not 1..n")
    if traj_segments is not None:
        want = set(traj_segments)
        have = {e.segment for e in events if e.op == "TrajGenerate"}
        if want != have:
            raise TraceViolation(f"trajectory ops on segments {sorted(have)}, expected {sorted(want)}")


def accepts(trace, K: int, traj_segments: Optional[Iterable[int]] = None) -> bool:
    try:
        check_trace(trace, K, traj_segments)
    except TraceViolation:
        return False
    return True


# ---------------------------------------------------------------- helpers

def duration_to_frames(seconds: float, fps: float = DEFAULT_FPS, cap: int = FRAME_CAP, downscale: int = 4) -> int:
    if not seconds > 0:
        raise ValueError("duration must be positive")
    return int(min(cap, max(downscale, round(seconds * fps))))


def _seed(base: int, *keys) -> int:
    h = hashlib.blake2b(repr((base,) + keys).encode(), digest_size=4)
    return int.from_bytes(h.digest(), "little")


@dataclass
class SegmentState:
    plan: PlanSegment
    grid: TokenGrid
    index: int = 0
    round: int = 0
    captions: List[str] = field(default_factory=list)
    instructions: List[CorrectionInstruction] = field(default_factory=list)
    profile: Optional[TrajectoryProfile] = None
    edits: int = 0


def _text(providers: Providers, prompt: str, local: Optional[Dict[str, str]] = None) -> TextBundle:
    return TextBundle.from_prompts(providers.embedder, prompt, local)


def _generate(plan: PlanSegment, providers: Providers, models: Models, cfg: WorkflowConfig, seg: int
              ) -> TokenGrid:
    frames = duration_to_frames(plan.duration_s or cfg.default_duration_s, cfg.fps, cfg.frame_cap,
                                models.downscale)
    n = math.ceil(frames / models.downscale)
    text = _text(providers, plan.base)
    base = generate_base(text, n, models.base, models.gen_cfg, seed=_seed(cfg.seed, "gen", seg))
    if models.res is None:
        layers = base[None]
    else:
        layers = generate_residuals(base, text, models.res, models.gen_cfg)
    grid = TokenGrid(layers, models.gen_cfg.mask_id)
    if grid.num_layers < models.vq.cfg.num_layers:
        pad = np.zeros((models.vq.cfg.num_layers - grid.num_layers,) + grid.layers.shape[1:], np.int64)
        grid = TokenGrid(np.concatenate([grid.layers, pad]), grid.mask_id)
    return grid


def _edit(grid: TokenGrid, prompt: str, local: Dict[str, str], providers: Providers, models: Models,
          cfg: WorkflowConfig, seed: int) -> TokenGrid:
    text = _text(providers, prompt, local)
    return edit_bodypart(grid, local.keys(), text, models.base, models.res, cfg.rho, models.gen_cfg, seed)


def instruction_edits(instr: CorrectionInstruction) -> Dict[str, str]:
    """Token rows and their local prompts for a correction instruction."""
    local = {}
    if instr.left_arm:
        local["LU"] = instr.left_arm
    if instr.right_arm:
        local["RU"] = instr.right_arm
    if instr.lower_body:
        local["LL"] = instr.lower_body
        local["RL"] = instr.lower_body
    return local


def correction_loop(state: SegmentState, providers: Providers, models: Models, cfg: WorkflowConfig,
                    trace: WorkflowTrace, review_dir) -> SegmentState:
    seg = state.index
    for k in range(1, cfg.K + 1):
        state.round = k
        motion = detokenize(state.grid, models.vq, cfg.fps)
        art = render_for_review(motion, Path(review_dir) / f"segment{seg:02d}_round{k}.json")
        trace.record("MotionReviewer", "Render", state.grid, art.joints, k, seg)
        cap = roles.caption(str(art.path), providers.captioner)
        state.captions.append(cap)
        trace.record("MotionReviewer", "Caption", art.joints, cap, k, seg)
        instr = roles.instruct(cap, state.plan.prompt, providers.llm)
        state.instructions.append(instr)
        trace.record("MotionReviewer", "Instruct", (cap, state.plan.prompt), instr, k, seg)
        if instr.empty:
            break
        local = instruction_edits(instr)
        new = _edit(state.grid, state.plan.prompt, local, providers, models, cfg, _seed(cfg.seed, "fix", seg, k))
        trace.record("MotionGenerator", "Edit", (state.grid, instr), new, k, seg)
        state.grid = new
        state.edits += 1
    return state


def _run_segment(i: int, step: dict, providers: Providers, models: Models, cfg: WorkflowConfig,
                 trace: WorkflowTrace, review_dir) -> SegmentState:
    plan = roles.decompose(step, providers.llm)
    trace.record("TaskPlanner", "Decompose", step["prompt"], plan, 0, i)
    grid = _generate(plan, providers, models, cfg, i)
    trace.record("MotionGenerator", "Generate", plan.base, grid, 0, i)
    state = SegmentState(plan, grid, i)
    local = {EDIT_PARTS[e.body_part]: e.description for e in plan.local_edits if e.description}
    if local:
        new = _edit(grid, plan.prompt, local, providers, models, cfg, _seed(cfg.seed, "edit", i))
        trace.record("MotionGenerator", "Edit", (grid, plan.local_edits), new, 0, i)
        state.grid = new
        state.edits += 1
    correction_loop(state, providers, models, cfg, trace, review_dir)
    if plan.traj and cfg.enable_trajectory:
        code, spec = roles.trajectory_program(plan.traj, providers.llm)
        trace.record("TrajectoryEditor", "TrajGenerate", plan.traj, code, 0, i)
        motion = detokenize(state.grid, models.vq, cfg.fps)
        v_bar = max(mean_root_speed(motion), 1e-6)
        poly = resample_uniform(sample_curve(spec), motion.T)
        state.profile = derive_profile(poly, v_bar)
        mapped = apply_trajectory(motion, state.profile)
        trace.record("TrajectoryEditor", "TrajMap", (motion, code), mapped, 0, i)
    return state


def blend_segments(states: Sequence[SegmentState], providers: Providers, models: Models,
                   cfg: WorkflowConfig) -> Tuple[TokenGrid, MotionSequence]:
    """Chain token-level blends, decode, then re-impose each segment's trajectory on its frames."""
    acc = states[0].grid
    starts = [0]
    for j, st in enumerate(states[1:], start=1):
        n_ctx = min(cfg.n_ctx, acc.n, st.grid.n)
        text = _text(providers, st.plan.prompt)
        acc = blend(acc, st.grid, text, models.base, models.res, cfg.n_trans, n_ctx, models.gen_cfg,
                    _seed(cfg.seed, "blend", j))
        starts.append(acc.n - st.grid.n)
    motion = detokenize(acc, models.vq, cfg.fps)
    ds = models.downscale
    frames = np.array(motion.frames)
    for st, s0 in zip(states, starts):
        if st.profile is None:
            continue
        a, b = s0 * ds, (s0 + st.grid.n) * ds
        part = apply_trajectory(MotionSequence(frames[a:b], cfg.fps), st.profile)
        frames[a:b] = part.frames
    return acc, MotionSequence(frames, cfg.fps)


def run_pipeline(prompt: str, providers: Providers, models: Models, cfg: Optional[WorkflowConfig] = None
                 ) -> Tuple[MotionSequence, WorkflowTrace]:
    cfg = cfg or WorkflowConfig()
    trace = WorkflowTrace()
    tmp = None
    review_dir = cfg.review_dir
    if review_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="coma-review-")
        review_dir = tmp.name
    try:
        with torch.no_grad():
            concrete = roles.rewrite(prompt, providers.llm)
            trace.record("TaskPlanner", "Rewrite", prompt, concrete)
            steps = roles.segment(concrete, prompt, providers.llm)
            trace.record("TaskPlanner", "Segment", concrete, steps)
            if cfg.jobs > 1 and len(steps) > 1:
                states = _run_parallel(steps, providers, models, cfg, trace, review_dir)
            else:
                states = [_run_segment(i, s, providers, models, cfg, trace, review_dir)
                          for i, s in enumerate(steps)]
            grid, motion = blend_segments(states, providers, models, cfg)
            trace.record("MotionGenerator", "Blend", [s.grid for s in states], motion)
    except WorkflowError:
        raise
    except Exception as exc:
        raise WorkflowError(f"{type(exc).__name__}: {exc}", trace) from exc
    finally:
        if tmp is not None:
            tmp.cleanup()
    return MotionSequence(motion.frames, cfg.fps, concrete), trace


def _run_parallel(steps, providers, models, cfg, trace, review_dir) -> List[SegmentState]:
    """Segments are independent until the blend; each gets its own trace buffer, merged in order."""
    for p in (providers.llm, providers.captioner):
        if isinstance(p, ScriptedProvider):
            raise ValueError("scripted transcripts are consumed in order; use jobs=1")
    buffers = [WorkflowTrace() for _ in steps]
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        futs = [pool.submit(_run_segment, i, s, providers, models, cfg, buffers[i], review_dir)
                for i, s in enumerate(steps)]
        states = [f.result() for f in futs]
    for b in buffers:
        trace.extend(b.events)
    return states
