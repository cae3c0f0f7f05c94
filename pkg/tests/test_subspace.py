import numpy as np
import pytest

from divconq.embedder import normalize_rows
from divconq.losses import mask_orthogonality_loss
from divconq.subspace import (FIXED, LEARNABLE, MaskSet, apply_mask, conquer,
                              init_fixed_orthogonal, init_root_mask,
                              save_masks_csv, split_mask, split_masks)


def test_root_mask():
    m = init_root_mask(4, LEARNABLE)
    assert m.k == 1 and m.masks.tolist() == [[1, 1, 1, 1]] and m.learnable
    E = np.arange(8.0).reshape(2, 4)
    assert np.array_equal(apply_mask(E, m.masks[0], normalize=False), E)
    with pytest.raises(ValueError):
        init_root_mask(0)


def test_fixed_orthogonal_layout():
    m = init_fixed_orthogonal(512, 32)
    assert np.all(m.masks.sum(1) == 16)
    G = m.masks @ m.masks.T
    assert np.all(G[~np.eye(32, dtype=bool)] == 0)
    assert mask_orthogonality_loss(m.masks)[0] == 0.0
    assert np.array_equal(conquer(m), np.ones(512))
    m = init_fixed_orthogonal(6, 3)
    assert m.masks.tolist() == [[1, 1, 0, 0, 0, 0], [0, 0, 1, 1, 0, 0],
                                [0, 0, 0, 0, 1, 1]]
    with pytest.raises(ValueError):
        init_fixed_orthogonal(10, 4)


def test_split_children_equal_parent(rng):
    parent = rng.normal(size=6)
    a, b = split_mask(parent)
    assert np.array_equal(a, parent) and np.array_equal(b, parent)
    a[0] += 1
    assert not np.array_equal(a, b)
    ms = MaskSet(rng.normal(size=(2, 6)), LEARNABLE, 1)
    kids = split_masks(ms)
    assert kids.k == 4 and kids.depth == 2
    for i in range(2):
        assert np.array_equal(kids.masks[2 * i], ms.masks[i])
        assert np.array_equal(kids.masks[2 * i + 1], ms.masks[i])


def test_fixed_split_reinitialises():
    kids = split_masks(init_fixed_orthogonal(8, 2))
    assert kids.mode == FIXED
    assert np.array_equal(kids.masks, init_fixed_orthogonal(8, 4).masks)


def test_apply_mask_relu_and_oracle(rng):
    E = rng.normal(size=(5, 4))
    mask = np.array([1.0, -0.5, 2.0, 0.3])
    out = apply_mask(E, mask, normalize=False)
    assert np.all(out[:, 1] == 0.0)
    U = apply_mask(E, mask)
    for r in range(5):
        z = [E[r, j] * max(mask[j], 0.0) for j in range(4)]
        n = sum(v * v for v in z) ** 0.5
        assert np.allclose(U[r], [v / n for v in z], atol=1e-15)
    with pytest.raises(ValueError):
        apply_mask(E, np.ones(3))


def test_conquer_examples(rng):
    root = init_root_mask(5)
    assert np.array_equal(conquer(root), root.masks[0])
    ms = MaskSet(rng.normal(size=(3, 5)), LEARNABLE)
    assert np.array_equal(conquer(ms), np.maximum(ms.masks, 0).sum(0))
    E = rng.normal(size=(4, 5))
    assert np.allclose(apply_mask(E, conquer(ms)),
                       normalize_rows(E * ms.truncated().sum(0))[0])


@pytest.mark.parametrize("k", [1, 2, 4, 8, 16])
def test_conquered_fixed_distances_equal_full_space(rng, k):
    E = rng.normal(size=(10, 16))
    ms = init_fixed_orthogonal(16, k)
    Uc = apply_mask(E, conquer(ms))
    U = normalize_rows(E)[0]
    assert np.array_equal(Uc, U)


def test_roundtrip_and_csv(tmp_path, rng):
    ms = MaskSet(rng.normal(size=(2, 3)), LEARNABLE, 1)
    back = MaskSet.from_dict(ms.to_dict())
    assert np.array_equal(back.masks, ms.masks) and back.mode == LEARNABLE
    save_masks_csv(ms, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "mask,dim_0,dim_1,dim_2" and len(lines) == 3
    assert all(float(v) >= 0 for v in lines[1].split(",")[1:])
    with pytest.raises(ValueError):
        MaskSet(np.ones((1, 2)), "other")
