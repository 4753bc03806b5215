import numpy as np
import pytest
import torch

from coma.checkpoint import load_module_state, load_tensors, save_module
from coma.motiondata import PARTS, MotionSequence, four_part_partition, slice_part, synthetic_corpus
from coma.spamvq import (Codebook, LatentSeq, RvqConfig, RvqTrainer, SpamVQ, TokenGrid, decode_whole,
                         detokenize, encode_part, nearest_code, quantize_residual, rvq_loss,
                         tokenize)

SMALL = RvqConfig(width=16, code_dim=4, codes_per_book=8)


def _model(cfg=SMALL, seed=0):
    torch.manual_seed(seed)
    m = SpamVQ(cfg)
    for p in PARTS:
        for b in m.books[p]:
            b.vectors.normal_()
            b.initialized.fill_(1.0)
    return m.eval()


def _zero_biases(module):
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()


def test_config_validation():
    for bad in (dict(num_layers=0), dict(codes_per_book=1), dict(quant_dropout=1.0), dict(downscale=3),
                dict(ema_decay=1.0)):
        with pytest.raises(ValueError):
            RvqConfig(**bad)
    assert RvqConfig.full_scale().num_layers == 6 and RvqConfig.full_scale().codes_per_book == 512


@pytest.mark.parametrize("T,n", [(8, 2), (196, 49), (7, 2), (1, 1)])
def test_encode_part_length(T, n):
    m = _model()
    pm = slice_part(MotionSequence(np.random.default_rng(0).normal(size=(T, 263))), "LU")
    z = encode_part(pm, m)
    assert z.vectors.shape == (n, SMALL.code_dim) and z.part == "LU"


def test_encode_zero_input_zero_bias():
    m = _model()
    _zero_biases(m.encoders["RL"])
    z = encode_part(slice_part(MotionSequence(np.zeros((8, 263))), "RL"), m)
    assert not z.vectors.any()


def test_encode_part_shape_error():
    from coma.motiondata import PartMotion
    with pytest.raises(ValueError):
        encode_part(PartMotion("LU", np.zeros((8, 3))), _model())


def test_nearest_code_examples():
    book = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
    assert nearest_code([0.2, 0.1], book) == 0
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(8, 3))
    assert nearest_code(vecs[3], vecs) == 3
    assert nearest_code([0.5, 0.5], book) == 0  # tie -> lowest index
    with pytest.raises(ValueError):
        nearest_code([0.0, 0.0], torch.zeros(0, 2))
    with pytest.raises(ValueError):
        nearest_code([np.nan, 0.0], book)


def test_nearest_code_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        book = rng.normal(size=(16, 5))
        v = rng.normal(size=5)
        best, best_d = -1, np.inf
        for k in range(16):
            d = float(((v - book[k]) ** 2).sum())
            if d < best_d:
                best, best_d = k, d
        assert nearest_code(v, book) == best


def test_quantize_exact_hit():
    rng = np.random.default_rng(2)
    books = [torch.tensor(rng.normal(size=(6, 3))) for _ in range(3)]
    latent = books[0][[4, 1]].clone()
    r = quantize_residual(latent, books)
    assert r.tokens[0].tolist() == [4, 1]
    assert torch.equal(r.residual_inputs[1], torch.zeros(2, 3))
    zero_code = nearest_code(np.zeros(3), books[1])
    assert r.tokens[1].tolist() == [zero_code, zero_code]


def test_quantize_active_one():
    rng = np.random.default_rng(3)
    books = [torch.tensor(rng.normal(size=(6, 3))) for _ in range(3)]
    latent = torch.tensor(rng.normal(size=(5, 3)))
    r = quantize_residual(latent, books, active_layers=1)
    assert torch.equal(r.quantized_sum, books[0][r.tokens[0]])
    assert (r.tokens[1:] == -1).all()
    with pytest.raises(ValueError):
        quantize_residual(latent, books, active_layers=4)


def _oracle_rvq(b, books):
    """Independent recursion in numpy: list of quantization errors per layer count."""
    r = b.copy()
    errs = []
    total = np.zeros_like(b)
    for book in books:
        idx = np.array([np.argmin(((book - row) ** 2).sum(1)) for row in r])
        total = total + book[idx]
        r = r - book[idx]
        errs.append(float(np.linalg.norm(b - total)))
    return errs


def test_quantize_error_monotone_with_zero_codes():
    rng = np.random.default_rng(4)
    books = []
    for _ in range(3):
        bk = rng.normal(size=(8, 4)) * 0.5
        bk[0] = 0.0  # zero code makes extra layers never hurt
        books.append(bk)
    b = rng.normal(size=(50, 4))
    errs = _oracle_rvq(b, books)
    assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errs, errs[1:]))
    for L in (1, 2, 3):
        r = quantize_residual(torch.tensor(b), [torch.tensor(x) for x in books], active_layers=L)
        assert float(torch.linalg.norm(torch.tensor(b) - r.quantized_sum)) == pytest.approx(errs[L - 1], abs=1e-9)


def test_residual_identity():
    rng = np.random.default_rng(5)
    books = [torch.tensor(rng.normal(size=(8, 4)), dtype=torch.float32) for _ in range(3)]
    b = torch.tensor(rng.normal(size=(100, 4)), dtype=torch.float32)
    r = quantize_residual(b, books)
    assert torch.allclose(r.quantized_sum + r.residual_final, b, atol=1e-6)


def test_decode_whole_zero_and_order():
    m = _model()
    _zero_biases(m.decoder)
    zeros = [LatentSeq(p, np.zeros((3, SMALL.code_dim), np.float32)) for p in PARTS]
    out = decode_whole(zeros, m)
    assert out.T == 3 * SMALL.downscale and not out.frames.any()
    rng = np.random.default_rng(6)
    lat = [LatentSeq(p, rng.normal(size=(3, SMALL.code_dim)).astype(np.float32)) for p in PARTS]
    swapped = [LatentSeq(PARTS[i], lat[j].vectors) for i, j in enumerate((1, 0, 2, 3))]
    assert not np.array_equal(decode_whole(lat, m).frames, decode_whole(swapped, m).frames)
    with pytest.raises(ValueError):
        decode_whole(lat[:3], m)
    with pytest.raises(ValueError):
        m.decode([torch.zeros(1, 3, 4)] * 3 + [torch.zeros(1, 2, 4)])


def test_rvq_loss_identities():
    m = torch.randn(2, 8, 263)
    r = [torch.randn(5, 4) for _ in range(3)]
    assert float(rvq_loss(m, m.clone(), r, [x.clone() for x in r], 0.02)) == 0.0
    mh = torch.randn(2, 8, 263)
    assert torch.equal(rvq_loss(m, mh, r, [torch.zeros(5, 4)] * 3, 0.0), torch.nn.functional.l1_loss(mh, m))


def test_commitment_gradient_flows_only_into_residual():
    r = torch.randn(5, 4, requires_grad=True)
    b = torch.randn(5, 4, requires_grad=True)
    m = torch.zeros(1, 4, 263)
    rvq_loss(m, m, [r], [b], 1.0).backward()
    assert b.grad is None or not b.grad.any()
    assert torch.allclose(r.grad, 2 * (r - b).detach() / r.numel())


def test_train_step_deterministic():
    clips = synthetic_corpus(2, 16, seed=1)
    states = []
    for _ in range(2):
        torch.manual_seed(0)
        m = SpamVQ(SMALL)
        tr = RvqTrainer(m, seed=0)
        losses = [tr.step(clips) for _ in range(3)]
        states.append((losses, {k: v.clone() for k, v in m.state_dict().items()}))
    assert states[0][0] == states[1][0]
    for k in states[0][1]:
        assert torch.equal(states[0][1][k], states[1][1][k]), k


def test_train_rejects_ragged_batch():
    tr = RvqTrainer(SpamVQ(SMALL))
    with pytest.raises(ValueError):
        tr.step([MotionSequence(np.zeros((8, 263))), MotionSequence(np.zeros((12, 263)))])
    with pytest.raises(ValueError):
        tr.step([])


def test_dead_code_reset():
    book = Codebook(4, 2)
    gen = torch.Generator().manual_seed(0)
    book.init_from(torch.randn(10, 2, generator=gen), gen)
    before = book.vectors[3].clone()
    x = torch.randn(6, 2, generator=gen) + 5.0
    idx = torch.zeros(6, dtype=torch.long)  # code 3 never assigned
    resets = 0
    for _ in range(200):
        resets += book.ema_update(x, idx, 0.9, reset_threshold=0.5, gen=gen)
    assert resets > 0
    assert not torch.equal(book.vectors[3], before)


def test_ema_fixed_point():
    book = Codebook(2, 3)
    gen = torch.Generator().manual_seed(0)
    book.init_from(torch.randn(4, 3, generator=gen), gen)
    x = torch.tensor([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    idx = torch.zeros(2, dtype=torch.long)
    target = x.mean(0)
    gaps = []
    for _ in range(50):
        book.ema_update(x, idx, 0.9)
        gaps.append(float(torch.linalg.norm(book.vectors[0] - target)))
    assert gaps[-1] < 0.05 * gaps[0]
    assert all(g2 <= g1 + 1e-7 for g1, g2 in zip(gaps, gaps[1:]))


def test_tokenize_detokenize():
    m = _model()
    clip = synthetic_corpus(1, 24, seed=2)[0]
    g1, g2 = tokenize(clip, m), tokenize(clip, m)
    assert np.array_equal(g1.layers, g2.layers)
    assert g1.layers.shape == (SMALL.num_layers, 4, 6)
    assert not g1.has_mask() and g1.layers.max() < SMALL.codes_per_book
    out = detokenize(g1, m)
    # independent gather: loop over layers and positions
    lat = []
    for pi, p in enumerate(PARTS):
        z = np.zeros((g1.n, SMALL.code_dim), np.float32)
        for v in range(g1.num_layers):
            for t in range(g1.n):
                z[t] += m.books[p][v].vectors[g1.layers[v, pi, t]].numpy()
        lat.append(LatentSeq(p, z))
    assert np.allclose(out.frames, decode_whole(lat, m).frames, atol=1e-6)
    masked = g1.copy()
    masked.layers[0, 1, 2] = masked.mask_id
    with pytest.raises(ValueError, match="MASK"):
        detokenize(masked, m)


def test_token_grid_validation():
    with pytest.raises(ValueError):
        TokenGrid(np.zeros((1, 3, 4)), 8)
    with pytest.raises(ValueError):
        TokenGrid(np.full((1, 4, 2), 9), 8)


def test_checkpoint_round_trip(tmp_path):
    m = _model()
    save_module(tmp_path / "vq.cmk", m)
    m2 = SpamVQ(SMALL)
    load_module_state(m2, load_tensors(tmp_path / "vq.cmk")[0])
    clip = synthetic_corpus(1, 16, seed=4)[0]
    assert np.array_equal(tokenize(clip, m).layers, tokenize(clip, m2.eval()).layers)


def test_partition_width_feeds_encoders():
    m = SpamVQ(SMALL)
    s = four_part_partition()
    for p in PARTS:
        assert m.encoders[p].net[0].in_channels == s.part_dim(p)
    assert m.decoder.net[0].in_channels == 4 * SMALL.code_dim


def test_training_reduces_loss():
    """500 steps on 16 synthetic clips: final loss below a quarter of the initial loss."""
    torch.manual_seed(1)
    clips = synthetic_corpus(16, 64, seed=1)
    tr = RvqTrainer(SpamVQ(RvqConfig()), seed=1)
    rng = np.random.default_rng(1)
    losses = [tr.step([clips[i] for i in rng.choice(16, 8, replace=False)]) for _ in range(500)]
    assert np.mean(losses[-20:]) < 0.25 * losses[0]
