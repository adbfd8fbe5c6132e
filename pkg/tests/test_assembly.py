import math

import numpy as np
import pytest

from oids.assembly import (
    FUSION_EARLY,
    FUSION_PLAIN,
    FUSION_SEPARATE,
    IDENT_GAUSSIAN,
    IDENT_LEARNABLE,
    IDENT_PLAIN,
    FuseLayer,
    IdentifierTable,
    Projector,
    build_scene_sequence,
    check_modes,
    gelu,
    gelu_grad,
)
from oids.errors import ConfigError, DataError
from oids.features import ObjectFeatures
from oids.rand import derive_rng
from oids.scene import ObjectProposal, PointCloud, make_scene
from oids.vocab import build_vocab


def box_scene(n: int):
    props = []
    for i in range(1, n + 1):
        pts = np.zeros((8, 6))
        corners = np.array(
            [[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)]
        )
        pts[:, 0:3] = corners + np.array([2.0 * i, 0.0, 0.0])
        pts[:, 3:6] = 0.5
        props.append(ObjectProposal(index=i, cloud=PointCloud(pts), category="box"))
    return make_scene(props, scene_id=f"scene-{n}")


def rand_features(n: int, d3: int, d2: int, seed: int = 0):
    rng = derive_rng("test-feat", seed)
    return {
        i: ObjectFeatures(
            z3d=rng.standard_normal(d3), z2d=rng.standard_normal(d2)
        )
        for i in range(1, n + 1)
    }


def scalar_gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


# -- activation --------------------------------------------------------------


def test_gelu_matches_scalar_formula():
    xs = np.array([-3.0, -1.0, -0.5, 0.0, 0.25, 1.0, 2.0, 10.0])
    expect = np.array([scalar_gelu(v) for v in xs])
    np.testing.assert_allclose(gelu(xs), expect, rtol=0, atol=1e-15)
    assert gelu(np.zeros(3)).tolist() == [0.0, 0.0, 0.0]


def test_gelu_grad_matches_finite_difference():
    xs = np.linspace(-4.0, 4.0, 33)
    eps = 1e-6
    numeric = (gelu(xs + eps) - gelu(xs - eps)) / (2 * eps)
    np.testing.assert_allclose(gelu_grad(xs), numeric, atol=1e-8)


# -- projector forward -------------------------------------------------------


def test_projector_hand_evaluated_2222():
    # Weights written out by hand; expected output computed with scalar
    # arithmetic below, independently of the vectorised implementation.
    w1 = np.array([[0.5, -0.25], [1.0, 0.75]])
    b1 = np.array([0.1, -0.2])
    w2 = np.array([[1.5, 0.0], [-1.0, 2.0]])
    b2 = np.array([0.05, 0.3])
    w3 = np.array([[2.0, -0.5], [0.25, 1.0]])
    b3 = np.array([-0.1, 0.2])
    proj = Projector(w1, b1, w2, b2, w3, b3)

    for x in ([0.0, 0.0], [0.3, -0.6]):
        a1 = [
            x[0] * w1[0, 0] + x[1] * w1[1, 0] + b1[0],
            x[0] * w1[0, 1] + x[1] * w1[1, 1] + b1[1],
        ]
        h1 = [scalar_gelu(v) for v in a1]
        a2 = [
            h1[0] * w2[0, 0] + h1[1] * w2[1, 0] + b2[0],
            h1[0] * w2[0, 1] + h1[1] * w2[1, 1] + b2[1],
        ]
        h2 = [scalar_gelu(v) for v in a2]
        expect = [
            h2[0] * w3[0, 0] + h2[1] * w3[1, 0] + b3[0],
            h2[0] * w3[0, 1] + h2[1] * w3[1, 1] + b3[1],
        ]
        y, _ = proj.forward(np.array(x))
        np.testing.assert_allclose(y, expect, rtol=0, atol=1e-12)


def test_projector_identity_construction():
    # Shift the single unit by +20 so the GELU sits in its saturated
    # region where gelu(x) == x exactly in float64, then shift back.
    one = np.array([[1.0]])
    proj = Projector(one, np.array([20.0]), one, np.array([0.0]), one, np.array([-20.0]))
    for v in (0.5, -0.25, 1.75):
        y, _ = proj.forward(np.array([v]))
        assert y[0] == v


def test_projector_deterministic_and_batched():
    rng = derive_rng("proj-det")
    proj = Projector.create(6, 8, rng)
    x = derive_rng("proj-x").standard_normal((5, 6)).astype(np.float32)
    y1, _ = proj.forward(x)
    y2, _ = proj.forward(x)
    assert np.array_equal(y1, y2)
    # Batched forward equals row-by-row forward.
    rows = np.stack([proj.forward(x[i])[0] for i in range(5)])
    np.testing.assert_allclose(y1, rows, rtol=0, atol=0)


def test_projector_rejects_dim_mismatch():
    proj = Projector.create(6, 8, derive_rng("proj-dim"))
    with pytest.raises(ValueError, match="expects dim 6"):
        proj.forward(np.zeros(5))
    with pytest.raises(ValueError, match="chain"):
        Projector(np.zeros((2, 3)), np.zeros(3), np.zeros((4, 4)), np.zeros(4),
                  np.zeros((4, 2)), np.zeros(2))


def test_projector_backward_matches_finite_difference():
    rng = derive_rng("proj-grad")
    proj = Projector.create(3, 4, rng, dtype=np.float64)
    x = derive_rng("proj-grad-x").standard_normal((2, 3))
    dy = derive_rng("proj-grad-dy").standard_normal((2, 4))
    y, cache = proj.forward(x)
    dx, grads = proj.backward(cache, dy)

    def loss(p):
        yy, _ = p.forward(x)
        return float((yy * dy).sum())

    eps = 1e-6
    for name, g in grads.items():
        arr = getattr(proj, name)
        flat = arr.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = loss(proj)
            flat[k] = orig - eps
            down = loss(proj)
            flat[k] = orig
            num = (up - down) / (2 * eps)
            assert abs(num - g.reshape(-1)[k]) < 1e-5, name
    xf = x.reshape(-1)
    for k in range(xf.size):
        orig = xf[k]
        xf[k] = orig + eps
        up = loss(proj)
        xf[k] = orig - eps
        down = loss(proj)
        xf[k] = orig
        assert abs((up - down) / (2 * eps) - dx.reshape(-1)[k]) < 1e-5


# -- fuse layer --------------------------------------------------------------


def test_fuse_constructed_weights():
    d = 4
    eye = np.eye(d)
    zero = np.zeros((d, d))
    fp = derive_rng("fuse-a").standard_normal((3, d))
    fv = derive_rng("fuse-b").standard_normal((3, d))

    take_p = FuseLayer(np.vstack([eye, zero]), np.zeros(d))
    y, _ = take_p.forward(fp, fv)
    np.testing.assert_allclose(y, fp, rtol=0, atol=0)

    mean = FuseLayer(0.5 * np.vstack([eye, eye]), np.zeros(d))
    y, _ = mean.forward(fp, fv)
    np.testing.assert_allclose(y, (fp + fv) / 2, rtol=0, atol=1e-15)


def test_fuse_random_weights_matmul_oracle():
    d = 5
    rng = derive_rng("fuse-rand")
    w = rng.standard_normal((2 * d, d))
    b = rng.standard_normal(d)
    fuse = FuseLayer(w, b)
    fp = rng.standard_normal((4, d))
    fv = rng.standard_normal((4, d))
    y, _ = fuse.forward(fp, fv)
    expect = np.concatenate([fp, fv], axis=1) @ w + b
    np.testing.assert_allclose(y, expect, rtol=0, atol=0)


def test_fuse_backward_matches_finite_difference():
    d = 3
    rng = derive_rng("fuse-grad")
    fuse = FuseLayer(rng.standard_normal((2 * d, d)), rng.standard_normal(d))
    fp = rng.standard_normal((2, d))
    fv = rng.standard_normal((2, d))
    dy = rng.standard_normal((2, d))
    _, cache = fuse.forward(fp, fv)
    dfp, dfv, grads = fuse.backward(cache, dy)

    def loss():
        y, _ = fuse.forward(fp, fv)
        return float((y * dy).sum())

    eps = 1e-6
    for arr, grad in ((fuse.w, grads["w"]), (fuse.b, grads["b"]),
                      (fp, dfp), (fv, dfv)):
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = loss()
            flat[k] = orig - eps
            down = loss()
            flat[k] = orig
            assert abs((up - down) / (2 * eps) - gflat[k]) < 1e-5


# -- identifier table --------------------------------------------------------


def test_identifier_table_modes():
    rng = derive_rng("table")
    base = derive_rng("base-table").standard_normal((50, 8)) * 0.7

    gauss = IdentifierTable.create(IDENT_GAUSSIAN, 5, 8, rng, base_table=base)
    assert not gauss.trainable
    # Frozen rows still surface through parameters() for checkpointing.
    assert "embeddings" in gauss.parameters()
    learn = IdentifierTable.create(IDENT_LEARNABLE, 200, 8, derive_rng("t2"), base_table=base)
    assert learn.trainable
    # Empirical std of the fresh rows tracks the base table's std.
    assert abs(learn.embeddings.std() / base.std() - 1.0) < 0.1

    plain = IdentifierTable.create(IDENT_PLAIN, 5, 8, rng)
    assert plain.embeddings is None
    assert plain.parameters() == {}
    with pytest.raises(ConfigError, match="no embedding rows"):
        plain.row(1)


def test_identifier_table_row_lookup():
    table = IdentifierTable.create(IDENT_GAUSSIAN, 4, 6, derive_rng("rows"))
    assert np.array_equal(table.row(1), table.embeddings[0])
    assert np.array_equal(table.row(4), table.embeddings[3])
    with pytest.raises(ValueError, match="outside"):
        table.row(5)
    with pytest.raises(ValueError, match="outside"):
        table.row(0)


def test_check_modes_consistency():
    check_modes(IDENT_PLAIN, FUSION_PLAIN)
    check_modes(IDENT_GAUSSIAN, FUSION_SEPARATE)
    check_modes(IDENT_LEARNABLE, FUSION_EARLY)
    with pytest.raises(ConfigError, match="inconsistent"):
        check_modes(IDENT_PLAIN, FUSION_SEPARATE)
    with pytest.raises(ConfigError, match="inconsistent"):
        check_modes(IDENT_GAUSSIAN, FUSION_PLAIN)
    with pytest.raises(ConfigError, match="unknown"):
        check_modes("telepathic", FUSION_PLAIN)


# -- sequence assembly -------------------------------------------------------


def _setup(n, fusion, d3=6, d2=5, d_model=8):
    vocab = build_vocab(n_identifiers=max(n, 8))
    scene = box_scene(n)
    feats = rand_features(n, d3, d2)
    proj3d = Projector.create(d3, d_model, derive_rng("p3", n))
    proj2d = Projector.create(d2, d_model, derive_rng("p2", n))
    fuse = FuseLayer.create(d_model, derive_rng("fz", n))
    text_rows = (derive_rng("rows", n).standard_normal((vocab.base_size, d_model)) * 0.1).astype(np.float32)
    mode = IDENT_PLAIN if fusion == FUSION_PLAIN else IDENT_GAUSSIAN
    table = IdentifierTable.create(mode, n, d_model, derive_rng("tab", n), base_table=text_rows)
    return scene, feats, table, proj3d, proj2d, fuse, vocab, text_rows


@pytest.mark.parametrize(
    "fusion,per_object",
    [(FUSION_SEPARATE, 3), (FUSION_EARLY, 2), (FUSION_PLAIN, 6)],
)
@pytest.mark.parametrize("n", [1, 10])
def test_object_region_token_costs(fusion, per_object, n):
    scene, feats, table, p3, p2, fz, vocab, rows = _setup(n, fusion)
    seq, _ = build_scene_sequence(
        scene, feats, table, fusion,
        proj3d=p3, proj2d=p2, fuse=fz, vocab=vocab, text_rows=rows,
    )
    assert seq.object_region_length == per_object * n
    # brackets + inter-block spaces are text positions outside the region
    assert seq.length == per_object * n + (n - 1) + 2
    assert len(seq.slots) == seq.embeddings.shape[0]


def test_sequence_slot_structure_separate():
    n = 3
    scene, feats, table, p3, p2, fz, vocab, rows = _setup(n, FUSION_SEPARATE)
    seq, cache = build_scene_sequence(
        scene, feats, table, FUSION_SEPARATE,
        proj3d=p3, proj2d=p2, vocab=vocab, text_rows=rows,
    )
    (lb,) = vocab.tokenize("[")
    (rb,) = vocab.tokenize("]")
    (sp,) = vocab.tokenize(" ")
    assert seq.slots[0] == ("text", lb)
    assert seq.slots[-1] == ("text", rb)
    assert seq.slots[1:4] == (("identifier", 1), ("obj3d", 1), ("obj2d", 1))
    assert seq.slots[4] == ("text", sp)
    # identifier rows come straight from the table, features through projectors
    np.testing.assert_array_equal(seq.embeddings[1], table.row(1))
    np.testing.assert_array_equal(seq.embeddings[2], cache.fp[0])
    np.testing.assert_array_equal(seq.embeddings[3], cache.fv[0])


def test_sequence_plain_text_spells_identifier():
    scene, feats, table, p3, p2, fz, vocab, rows = _setup(2, FUSION_PLAIN)
    seq, _ = build_scene_sequence(
        scene, feats, table, FUSION_PLAIN,
        proj3d=p3, proj2d=p2, vocab=vocab, text_rows=rows,
    )
    start, end = seq.span(2)
    assert end - start == 6
    toks = [seq.slots[j] for j in range(start, start + 4)]
    expect_ids = vocab.tokenize("OBJ002")
    assert toks == [("text", t) for t in expect_ids]
    assert seq.slots[start + 4] == ("obj3d", 2)
    assert seq.slots[start + 5] == ("obj2d", 2)


def test_early_fusion_uses_fused_rows():
    scene, feats, table, p3, p2, fz, vocab, rows = _setup(2, FUSION_EARLY)
    seq, cache = build_scene_sequence(
        scene, feats, table, FUSION_EARLY,
        proj3d=p3, proj2d=p2, fuse=fz, vocab=vocab, text_rows=rows,
    )
    expect, _ = fz.forward(cache.fp, cache.fv)
    s1, _ = seq.span(1)
    np.testing.assert_array_equal(seq.embeddings[s1 + 1], expect[0])
    assert seq.slots[s1 + 1] == ("fused", 1)


def test_block_permutation_integrity():
    # Feeding object i the features that object sigma(i) had (and the
    # matching identifier rows) moves whole blocks, bit for bit.
    n = 4
    scene, feats, table, p3, p2, fz, vocab, rows = _setup(n, FUSION_SEPARATE)
    sigma = [3, 1, 4, 2]  # image of 1..4
    feats2 = {i: feats[sigma[i - 1]] for i in range(1, n + 1)}
    table2 = IdentifierTable(
        IDENT_GAUSSIAN, np.stack([table.row(sigma[i - 1]) for i in range(1, n + 1)])
    )
    seq1, _ = build_scene_sequence(
        scene, feats, table, FUSION_SEPARATE,
        proj3d=p3, proj2d=p2, vocab=vocab, text_rows=rows,
    )
    seq2, _ = build_scene_sequence(
        scene, feats2, table2, FUSION_SEPARATE,
        proj3d=p3, proj2d=p2, vocab=vocab, text_rows=rows,
    )
    for i in range(1, n + 1):
        s2 = seq2.span(i)
        s1 = seq1.span(sigma[i - 1])
        block2 = seq2.embeddings[s2[0]:s2[1]]
        block1 = seq1.embeddings[s1[0]:s1[1]]
        assert np.array_equal(block2, block1)


def test_missing_feature_names_object():
    scene, feats, table, p3, p2, fz, vocab, rows = _setup(3, FUSION_SEPARATE)
    del feats[2]
    with pytest.raises(DataError, match="object 2"):
        build_scene_sequence(
            scene, feats, table, FUSION_SEPARATE,
            proj3d=p3, proj2d=p2, vocab=vocab, text_rows=rows,
        )


def test_mode_mismatch_and_missing_fuse_rejected():
    scene, feats, table, p3, p2, fz, vocab, rows = _setup(2, FUSION_SEPARATE)
    with pytest.raises(ConfigError, match="inconsistent"):
        build_scene_sequence(
            scene, feats, table, FUSION_PLAIN,
            proj3d=p3, proj2d=p2, vocab=vocab, text_rows=rows,
        )
    with pytest.raises(ConfigError, match="fuse layer"):
        build_scene_sequence(
            scene, feats, table, FUSION_EARLY,
            proj3d=p3, proj2d=p2, fuse=None, vocab=vocab, text_rows=rows,
        )


def test_too_small_vocab_or_table_rejected():
    scene, feats, table, p3, p2, fz, vocab, rows = _setup(3, FUSION_SEPARATE)
    small_table = IdentifierTable(IDENT_GAUSSIAN, table.embeddings[:2])
    with pytest.raises(ConfigError, match="2 rows"):
        build_scene_sequence(
            scene, feats, small_table, FUSION_SEPARATE,
            proj3d=p3, proj2d=p2, vocab=vocab, text_rows=rows,
        )
