import numpy as np
import pytest

from protocode import encoder as enc
from protocode import tensorcore as tc


def _cfg(**kw):
    base = dict(
        vocab_size=30, side_vocab_size=12, max_len=16, dim=8, layers=1,
        heads=2, ff_dim=16, dropout=0.0, fusion="none", side_dim=6,
        adapter_dim=4,
    )
    base.update(kw)
    return enc.EncoderConfig(**base)


def _batch(rng, cfg, bsz=3, n=6):
    ids = rng.integers(1, cfg.vocab_size + 1, size=(bsz, n))
    lengths = rng.integers(2, n + 1, size=bsz)
    mask = np.arange(n)[None, :] < lengths[:, None]
    ids = np.where(mask, ids, 1)  # pad id
    return ids, mask


def _side(params, cfg, rng):
    ids = list(rng.integers(0, cfg.side_vocab_size, size=4))
    return enc.embed_side(params, cfg, [int(i) for i in ids], [])


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(dim=9, heads=2)
    with pytest.raises(ValueError):
        _cfg(dropout=1.0)
    with pytest.raises(ValueError):
        _cfg(fusion="bogus")
    with pytest.raises(ValueError):
        _cfg(fusion="film", side_vocab_size=0)


def test_embed_side_empty_rubric_is_identity():
    cfg = _cfg(fusion="task_token")
    params = enc.init_params(cfg, seed=0)
    z = [1, 2, 3]
    only = enc.embed_side(params, cfg, z, [])
    assert np.allclose(only.data, enc.embed_side(params, cfg, z, []).data)
    both = enc.embed_side(params, cfg, z, z)
    assert np.allclose(both.data, 2 * only.data, atol=1e-6)


def test_embed_side_rejects_double_empty_under_fusion():
    cfg = _cfg(fusion="task_token")
    params = enc.init_params(cfg, seed=0)
    with pytest.raises(enc.EmptySide):
        enc.embed_side(params, cfg, [], [])
    none_cfg = _cfg(fusion="none")
    none_params = enc.init_params(none_cfg, seed=0)
    vec = enc.embed_side(none_params, none_cfg, [], [])
    assert np.allclose(vec.data, 0.0)


def test_side_vocab_round_trip(tmp_path):
    vocab = enc.SideVocab.build(["Count the even numbers", "sum from 1 to n"])
    path = tmp_path / "side.vocab"
    vocab.save(path)
    loaded = enc.SideVocab.load(path)
    assert loaded.ids == vocab.ids
    assert loaded.encode("count the even sum") == vocab.encode("count the even sum")
    assert loaded.encode("zzz unknown")[-1] == 0


def test_zero_projected_task_token_matches_plain_at_identity_depth():
    rng = np.random.default_rng(0)
    cfg_none = _cfg(layers=0)
    cfg_tt = _cfg(layers=0, fusion="task_token")
    params = enc.init_params(cfg_tt, seed=1)
    params["task_proj_w"].data[:] = 0.0
    params["task_proj_b"].data[:] = 0.0
    ids, mask = _batch(rng, cfg_tt)
    side = _side(params, cfg_tt, rng)
    with_token = enc.fuse_and_encode(params, cfg_tt, ids, mask, side)
    plain = enc.fuse_and_encode(params, cfg_none, ids, mask, None)
    assert np.allclose(with_token.data, plain.data, atol=1e-6)


def test_single_token_identity_encoder_embedding():
    cfg = _cfg(layers=0)
    params = enc.init_params(cfg, seed=2)
    ids = np.array([[7]])
    mask = np.ones((1, 1), dtype=bool)
    out = enc.fuse_and_encode(params, cfg, ids, mask, None)
    expect = params["tok_emb"].data[7] + params["pos_emb"].data[0]
    assert np.allclose(out.data[0], expect, atol=1e-6)


@pytest.mark.parametrize("fusion", ["film", "adapter"])
def test_identity_initialized_fusion_matches_no_side(fusion):
    rng = np.random.default_rng(3)
    cfg_side = _cfg(fusion=fusion, layers=2)
    cfg_none = _cfg(fusion="none", layers=2)
    params = enc.init_params(cfg_side, seed=4)
    plain = enc.init_params(cfg_none, seed=4)
    # shared backbone weights, seed-matched by construction order
    for name, p in plain.items():
        p.data[:] = params[name].data
    ids, mask = _batch(rng, cfg_side)
    side = _side(params, cfg_side, rng)
    fused = enc.fuse_and_encode(params, cfg_side, ids, mask, side)
    bare = enc.fuse_and_encode(plain, cfg_none, ids, mask, None)
    assert np.allclose(fused.data, bare.data, atol=1e-6)


@pytest.mark.parametrize("fusion", enc.FUSION_MODES)
def test_pad_invariance(fusion):
    rng = np.random.default_rng(5)
    cfg = _cfg(fusion=fusion, layers=2)
    params = enc.init_params(cfg, seed=6)
    # break the identity inits so fusion actually does something
    for name, p in params.items():
        if "film" in name or "up_w" in name or "task_proj" in name:
            p.data[:] = rng.normal(0, 0.05, p.shape).astype(np.float32)
    ids = rng.integers(2, cfg.vocab_size + 1, size=(2, 5))
    mask = np.ones((2, 5), dtype=bool)
    side = _side(params, cfg, rng) if fusion != "none" else None
    base = enc.fuse_and_encode(params, cfg, ids, mask, side)
    padded_ids = np.concatenate([ids, np.ones((2, 3), dtype=ids.dtype)], axis=1)
    padded_mask = np.concatenate([mask, np.zeros((2, 3), dtype=bool)], axis=1)
    padded = enc.fuse_and_encode(params, cfg, padded_ids, padded_mask, side)
    assert np.allclose(base.data, padded.data, atol=1e-6)


def test_attention_rows_are_probability_vectors():
    rng = np.random.default_rng(7)
    cfg = _cfg(layers=1)
    params = enc.init_params(cfg, seed=8)
    ids, mask = _batch(rng, cfg, bsz=4, n=7)
    rows = enc.attention_probe(params, cfg, ids, mask)
    assert rows.shape == (4, cfg.heads, 7, 7)
    assert np.all(rows >= 0)
    assert np.allclose(rows.sum(axis=-1), 1.0, atol=1e-6)
    # padded keys receive no attention from real queries
    for b in range(4):
        dead = ~mask[b]
        assert np.allclose(rows[b][:, mask[b]][:, :, dead], 0.0, atol=1e-6)


def test_batch_permutation_equivariance():
    rng = np.random.default_rng(9)
    cfg = _cfg(fusion="task_token", layers=2)
    params = enc.init_params(cfg, seed=10)
    ids, mask = _batch(rng, cfg, bsz=5, n=6)
    side = _side(params, cfg, rng)
    out = enc.fuse_and_encode(params, cfg, ids, mask, side)
    perm = rng.permutation(5)
    out_perm = enc.fuse_and_encode(params, cfg, ids[perm], mask[perm], side)
    assert np.allclose(out.data[perm], out_perm.data, atol=1e-6)


def test_length_overflow_under_task_token():
    rng = np.random.default_rng(11)
    cfg = _cfg(fusion="task_token", max_len=8)
    params = enc.init_params(cfg, seed=12)
    side = _side(params, cfg, rng)
    ids = np.ones((1, 8), dtype=np.int64)
    mask = np.ones((1, 8), dtype=bool)
    with pytest.raises(enc.LengthOverflow):
        enc.fuse_and_encode(params, cfg, ids, mask, side)
    # same length is fine without the prepended token
    plain_cfg = _cfg(max_len=8)
    plain = enc.init_params(plain_cfg, seed=12)
    enc.fuse_and_encode(plain, plain_cfg, ids, mask, None)


def test_eval_mode_is_deterministic_and_train_dropout_differs():
    rng = np.random.default_rng(13)
    cfg = _cfg(dropout=0.5, layers=1)
    params = enc.init_params(cfg, seed=14)
    ids, mask = _batch(rng, cfg)
    a = enc.fuse_and_encode(params, cfg, ids, mask, None)
    b = enc.fuse_and_encode(params, cfg, ids, mask, None)
    assert np.array_equal(a.data, b.data)
    t1 = enc.fuse_and_encode(params, cfg, ids, mask, None, train=True,
                             drop_rng=np.random.default_rng(0))
    t2 = enc.fuse_and_encode(params, cfg, ids, mask, None, train=True,
                             drop_rng=np.random.default_rng(1))
    assert not np.array_equal(t1.data, t2.data)


def test_full_encoder_gradient_check():
    rng = np.random.default_rng(15)
    cfg = _cfg(dim=8, layers=1, heads=2, ff_dim=12, fusion="task_token")
    params = enc.init_params(cfg, seed=16)
    # move fusion weights off their identity init so their grads are live
    for name in ("task_proj_w", "task_proj_b"):
        params[name].data[:] = rng.normal(0, 0.1, params[name].shape).astype(np.float32)
    ids, mask = _batch(rng, cfg, bsz=2, n=5)
    probe = tc.Tensor(rng.normal(size=(2, cfg.dim)))
    side_ids = [1, 2, 5]

    def loss_fn(p):
        side = enc.embed_side(p, cfg, side_ids, [4])
        pooled = enc.fuse_and_encode(p, cfg, ids, mask, side)
        return tc.mean_all(tc.squared_distance(pooled, tc.Tensor(probe.data.astype(p["tok_emb"].dtype))))

    results = tc.gradient_check(loss_fn, params, n_coords=60, seed=17)
    worst = max(r[4] for r in results)
    assert worst < 1e-3, f"worst rel err {worst:.2e}"
