"""Acceptance suite: one test per criterion, each printing a pass/fail line."""

import json
import math
import time

import numpy as np
import pytest
import torch

from acceptance_report import criterion
from coma.agents.parsers import ReplyParseError, parse_correction, parse_local_edits, parse_steps
from coma.agents.providers import HashEmbedder, ScriptedProvider
from coma.editops import blend, edit_bodypart, edit_inbetween
from coma.evalmetrics import fid, mas, r_precision
from coma.motiondata import PARTS, synthetic_corpus, synthetic_motion
from coma.orchestrator import Models, Providers, WorkflowConfig, check_trace, run_pipeline
from coma.spamgen import (BaseTrainer, BaseTransformer, GenConfig, ResidualTransformer, TextBundle, base_loss,
                          cfg_logits, gamma, mask_count, masked_token_accuracy, residual_loss)
from coma.spamvq import RvqConfig, RvqTrainer, SpamVQ, TokenGrid, detokenize, quantize_residual, rvq_loss, tokenize
from coma.trajedit import (apply_trajectory, parse_curve_spec, read_profile, resample_uniform, sample_curve,
                           spacing_dispersion, trajectory_from_spec)

from scenarios import FIXTURES, SYNTHETIC, build_transcript, expected_edits
from test_agents import (COMPARE_EXAMPLE, COMPARE_MALFORMED, EDITS_EXAMPLE, EDITS_MALFORMED, STEP_CASES,
                         STEP_FAILURES)


# ---------------------------------------------------------------- 1

def test_c01_rvq_identity():
    with criterion(1, "RVQ identity: input = sum of layer codes + final residual"):
        t0 = time.perf_counter()
        gen = torch.Generator().manual_seed(0)
        books = [torch.randn(512, 128, generator=gen) for _ in range(6)]
        latent = torch.randn(1000, 128, generator=gen) * 3
        r = quantize_residual(latent, books)
        assert r.residual_final.dtype == torch.float32
        # independent sum over the per-layer selections
        total = torch.zeros_like(latent)
        for v in range(6):
            total += books[v][r.tokens[v]]
        err = float((total + r.residual_final - latent).abs().max())
        assert err < 1e-5, err
        assert time.perf_counter() - t0 < 5.0


# ---------------------------------------------------------------- 2

def _fd(fun, x, h=1e-6):
    """Central differences of scalar fun at numpy vector x."""
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _rvq_gradient_check():
    """Autograd through the straight-through forward vs an independent numpy oracle.

    With code assignments held fixed, the straight-through gradient for the latent z is
    d/du recon(decode(u)) at u = quantized sum, plus the commitment term's gradient
    with codes as constants.  Decoder gradients are ordinary derivatives at u.
    """
    rng = np.random.default_rng(0)
    n, d, D, beta = 4, 3, 5, 0.25
    z0 = rng.normal(size=(n, d))
    W0, b0 = rng.normal(size=(D, d)), rng.normal(size=D)
    target = rng.normal(size=(n, D))
    books_np = [rng.normal(size=(4, d)) for _ in range(3)]

    z = torch.tensor(z0, requires_grad=True)
    W = torch.tensor(W0, requires_grad=True)
    b = torch.tensor(b0, requires_grad=True)
    res = quantize_residual(z, [torch.tensor(x) for x in books_np])
    u = z + (res.quantized_sum - z).detach()
    loss = rvq_loss(torch.tensor(target), u @ W.T + b, res.residual_inputs, res.quantized, beta)
    loss.backward()
    analytic = np.concatenate([z.grad.numpy().ravel(), W.grad.numpy().ravel(), b.grad.numpy().ravel()])
    assert z.numel() + W.numel() + b.numel() <= 200

    # oracle: nearest codes recomputed in numpy
    qs, r = [], z0.copy()
    for bk in books_np:
        q = bk[np.argmin(((r[:, None, :] - bk[None]) ** 2).sum(-1), axis=1)]
        qs.append(q)
        r = r - q
    qsum = sum(qs)

    def recon(u_, W_, b_):
        return np.abs(target - (u_ @ W_.T + b_)).mean()

    def commit(zp):
        total, r_ = 0.0, zp
        for q in qs:
            total += beta * ((r_ - q) ** 2).mean()
            r_ = r_ - q
        return total

    g_u = _fd(lambda v: recon(v.reshape(n, d), W0, b0), qsum.ravel())
    g_c = _fd(lambda v: commit(v.reshape(n, d)), z0.ravel())
    g_W = _fd(lambda v: recon(qsum, v.reshape(D, d), b0), W0.ravel())
    g_b = _fd(lambda v: recon(qsum, W0, v), b0.copy())
    oracle = np.concatenate([g_u + g_c, g_W, g_b])
    return _rel(analytic, oracle)


TOY = GenConfig(layers=1, heads=1, model_dim=3, ff_mult=1, text_dim=2, num_codes=2, max_tokens=2,
                rvq_layers=2)


def _torch_fd_check(loss_fn, params, h=1e-6):
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).numpy()
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                up = float(loss_fn())
                flat[i] = old - h
                down = float(loss_fn())
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    return _rel(analytic, np.array(numeric)), analytic.size


def test_c02_gradients():
    with criterion(2, "gradients match central differences (rel 1e-3, <=200 params)"):
        t0 = time.perf_counter()
        assert _rvq_gradient_check() < 1e-3
        torch.manual_seed(0)
        base = BaseTransformer(TOY).double()
        tokens = torch.tensor([[[0, 1], [1, 1], [0, 0], [1, 0]]])
        mask = torch.tensor([[[True, False], [False, True], [True, True], [False, False]]])
        texts = [TextBundle(np.array([0.3, -0.7]))]
        rel, count = _torch_fd_check(lambda: base_loss(base, tokens, texts, mask), list(base.parameters()))
        assert count <= 200 and rel < 1e-3, (count, rel)
        res = ResidualTransformer(TOY).double()
        grids = torch.tensor([[[[0, 1], [1, 1], [0, 0], [1, 0]], [[1, 0], [0, 1], [1, 1], [0, 0]]]])
        rel, count = _torch_fd_check(lambda: residual_loss(res, grids, texts, [1]), list(res.parameters()))
        assert count <= 200 and rel < 1e-3, (count, rel)
        assert time.perf_counter() - t0 < 30.0


# ---------------------------------------------------------------- 3

def test_c03_desk_overfit():
    with criterion(3, "desk overfit: RVQ L1 < 0.05 and base accuracy >= 95% within 2000 steps"):
        t0 = time.perf_counter()
        torch.manual_seed(0)
        clips = synthetic_corpus(8, 64, seed=0)
        vq = SpamVQ(RvqConfig())
        tr = RvqTrainer(vq, seed=0)

        def recon_l1():
            vq.eval()
            with torch.no_grad():
                return float(np.mean([np.abs(detokenize(tokenize(c, vq), vq).frames - c.frames).mean()
                                      for c in clips]))

        l1 = math.inf
        for step in range(1, 2001):
            tr.step(clips)
            if step % 50 == 0:
                l1 = recon_l1()
                if l1 < 0.05:
                    break
        print(f"  rvq: L1 {l1:.4f} after {step} steps")
        assert l1 < 0.05

        cfg = vq.cfg
        grids = np.stack([tokenize(c, vq).layers for c in clips])
        emb = HashEmbedder(32)
        texts = [TextBundle.from_prompts(emb, f"a person performs motion number {i}") for i in range(8)]
        base = BaseTransformer(GenConfig(num_codes=cfg.codes_per_book, rvq_layers=cfg.num_layers))
        bt = BaseTrainer(base, seed=0)
        acc = 0.0
        for step in range(1, 2001):
            bt.step(grids, texts)
            if step % 50 == 0:
                acc = masked_token_accuracy(base, grids, texts, seed=1)
                if acc >= 0.95:
                    break
        print(f"  base: accuracy {acc:.3f} after {step} steps")
        assert acc >= 0.95
        assert time.perf_counter() - t0 < 600


# ---------------------------------------------------------------- 4

def test_c04_schedule_cfg():
    with criterion(4, "schedule and CFG identities"):
        assert gamma(0.0) == 1.0 and gamma(1.0) == 0.0
        assert abs(gamma(0.5) - math.sqrt(2) / 2) <= 1e-9
        c, u = torch.randn(3, 7, 11), torch.randn(3, 7, 11)
        out = cfg_logits(c, u, 0.0)
        assert out.numpy().tobytes() == c.numpy().tobytes()
        assert mask_count(100, 0.5) == 71


# ---------------------------------------------------------------- 5

def _identity(att):
    with torch.no_grad():
        att.proj.weight.zero_()
        att.proj.bias.zero_()


def _leak(model, g, g2):
    emb = HashEmbedder(8)
    text = [TextBundle.from_prompts(emb, "a person walks")]
    with torch.no_grad():
        h1 = model.run(model.embed(torch.as_tensor(g)[None]), text, return_hidden=True)[0]
        h2 = model.run(model.embed(torch.as_tensor(g2)[None]), text, return_hidden=True)[0]
    return (h1 != h2).any(-1)  # (4, 1 + n): which tokens changed


def test_c05_attention_locality():
    with criterion(5, "spatial mixes within a time step, temporal within a part row"):
        cfg = GenConfig(layers=2, heads=2, model_dim=16, text_dim=8, num_codes=6, max_tokens=12)
        rng = np.random.default_rng(0)
        for trial in range(10):
            g = rng.integers(0, 6, size=(4, 10))
            p, t = int(rng.integers(0, 4)), int(rng.integers(0, 10))
            g2 = g.copy()
            g2[p, t] = (g2[p, t] + 1) % 6
            torch.manual_seed(trial)
            spatial_only = BaseTransformer(cfg).eval()
            for blk in spatial_only.blocks:
                _identity(blk.temporal)
            d = _leak(spatial_only, g, g2)
            assert d[:, 1 + t].any()
            d[:, 1 + t] = False
            assert not d.any(), "spatial sub-layer leaked across time"
            torch.manual_seed(trial)
            temporal_only = BaseTransformer(cfg).eval()
            for blk in temporal_only.blocks:
                _identity(blk.spatial)
            d = _leak(temporal_only, g, g2)
            assert d[p].any()
            d[p] = False
            assert not d.any(), "temporal sub-layer leaked across parts"


# ---------------------------------------------------------------- 6

def test_c06_edit_immutability():
    with criterion(6, "edits leave untouched regions bitwise unchanged; blend length"):
        cfg = GenConfig(layers=1, heads=2, model_dim=16, text_dim=8, num_codes=6, rvq_layers=3, max_tokens=24,
                        steps=3)
        torch.manual_seed(0)
        base, res = BaseTransformer(cfg).eval(), ResidualTransformer(cfg).eval()
        text = TextBundle.from_prompts(HashEmbedder(8), "a person jumps")
        rng = np.random.default_rng(0)
        for trial in range(500):
            n = int(rng.integers(2, 13))
            g = TokenGrid(rng.integers(0, 6, size=(3, 4, n)), 6)
            if trial % 2 == 0:
                a = int(rng.integers(0, n))
                b = int(rng.integers(a, n + 1))
                out = edit_inbetween(g, a, b, text, base, res, seed=trial)
                keep = np.ones(n, bool)
                keep[a:b] = False
                assert out.layers[:, :, keep].tobytes() == g.layers[:, :, keep].tobytes()
            else:
                parts = set(rng.choice(PARTS, size=int(rng.integers(1, 4)), replace=False).tolist())
                out = edit_bodypart(g, parts, text, base, res, rho=0.0, seed=trial)
                rows = [i for i, q in enumerate(PARTS) if q not in parts]
                assert out.layers[:, rows].tobytes() == g.layers[:, rows].tobytes()
        for na, nb, nt in ((5, 7, 0), (4, 4, 3), (9, 2, 6)):
            a = TokenGrid(rng.integers(0, 6, size=(3, 4, na)), 6)
            b = TokenGrid(rng.integers(0, 6, size=(3, 4, nb)), 6)
            assert blend(a, b, text, base, res, n_trans=nt, n_ctx=2).n == na + nt + nb


# ---------------------------------------------------------------- 7

HEART = ("x = 16*sin(t)^3;\n"
         "y = 13*cos(t) - 5*cos(2*t) - 2*cos(3*t) - cos(4*t);\n"
         "t in [0, 2*pi];")


def test_c07_trajectory():
    with criterion(7, "heart curve closed, 196-point resample uniform, column-0-only mapping"):
        spec = parse_curve_spec(HEART)
        x0, y0 = spec.evaluate(spec.t_start)
        x1, y1 = spec.evaluate(spec.t_end)
        assert math.hypot(x1[0] - x0[0], y1[0] - y0[0]) < 1e-9
        poly = resample_uniform(sample_curve(spec), 196)
        assert len(poly) == 196 and spacing_dispersion(poly) < 0.01
        m = synthetic_motion(0, 196)
        _, prof = trajectory_from_spec(HEART, 196, 0.05)
        out = apply_trajectory(m, prof)
        changed = np.nonzero((out.frames != m.frames).any(axis=0))[0].tolist()
        assert set(changed) <= {0}
        assert np.abs(read_profile(out) - prof.heading_delta).max() < 1e-6


# ---------------------------------------------------------------- 8

def test_c08_parsers():
    with criterion(8, "step, local-edit and reviewer parsers on fixed corpora"):
        assert len(STEP_CASES) + len(STEP_FAILURES) >= 20
        for reply, want in STEP_CASES:
            assert [s["prompt"] for s in parse_steps(reply)] == want, reply
        for reply in STEP_FAILURES:
            with pytest.raises(ReplyParseError):
                parse_steps(reply)
        assert parse_local_edits(EDITS_EXAMPLE)[0].description
        assert not parse_correction(COMPARE_EXAMPLE).empty
        assert len(EDITS_MALFORMED) >= 10 and len(COMPARE_MALFORMED) >= 10
        for reply in EDITS_MALFORMED:
            with pytest.raises(ReplyParseError):
                parse_local_edits(reply)
        for reply in COMPARE_MALFORMED:
            with pytest.raises(ReplyParseError):
                parse_correction(reply)


# ---------------------------------------------------------------- 9

def test_c09_workflow_conformance():
    with criterion(9, "scripted scenarios follow the workflow automaton, offline, < 10 s"):
        t0 = time.perf_counter()
        models = Models.untrained(seed=0)
        entries = json.loads((FIXTURES / "henry.json").read_text())
        llm = ScriptedProvider(entries)
        _, trace = run_pipeline("henry", Providers(llm), models, WorkflowConfig(K=2))
        check_trace(trace, 2, traj_segments=[1])
        assert llm.remaining == 0
        for name, (K, segs) in SYNTHETIC.items():
            llm = ScriptedProvider(build_transcript("A person moves.", segs, K))
            _, trace = run_pipeline(name, Providers(llm), models, WorkflowConfig(K=K))
            check_trace(trace, K, traj_segments=[i for i, s in enumerate(segs) if s.traj])
            assert llm.remaining == 0 and trace.ops().count("Edit") == expected_edits(segs, K)
            if name == "cap_two_segments":  # K-cap: never more than K rounds
                for s in range(2):
                    assert [e.round for e in trace.events if e.op == "Render" and e.segment == s] == [1, 2]
            if name == "lower_then_none":  # empty instruction ends the loop before the cap
                assert trace.ops()[-4:] == ["Render", "Caption", "Instruct", "Blend"]
        assert time.perf_counter() - t0 < 10.0


# ---------------------------------------------------------------- 10

def test_c10_metrics():
    with criterion(10, "FID, R-precision and MAS identities"):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5000, 8))
        assert fid(a, a) < 1e-6
        delta = rng.normal(size=8)
        b = rng.normal(size=(5000, 8)) + delta
        want = float(delta @ delta)
        assert abs(fid(a, b) - want) < 0.05 * want
        e = rng.normal(size=(256, 16))
        assert r_precision(e, e) == 1.0
        M, p = 3000, 1 / 32
        got = r_precision(rng.normal(size=(M, 16)), rng.normal(size=(M, 16)), seed=2)
        assert abs(got - p) < 3 * math.sqrt(p * (1 - p) / M), got
        v = rng.normal(size=16)
        w = rng.normal(size=16)
        w -= (w @ v) / (v @ v) * v
        assert mas(v, v) == pytest.approx(100.0, abs=1e-9)
        assert mas(v, w) == pytest.approx(0.0, abs=1e-9)
        assert mas(v, -v) == pytest.approx(-100.0, abs=1e-9)
