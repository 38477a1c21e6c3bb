import numpy as np
import pytest

from equiseg.bank import (
    GroupSpec,
    as_pattern_array,
    count_shared_params,
    count_unshared_params,
    expand_group_bank,
    expand_lifting_bank,
    load_bank,
    save_bank,
)
from equiseg.basis import ParamFilter, TransformSpec, discretize, make_fourier_basis
from equiseg.errors import InvalidArgument

PAPER_GROUP = GroupSpec(n_rot=8, n_scale=4, mu=1.25, base_p=6, h=0.5)


def _filters(shape, basis, seed=0):
    rng = np.random.default_rng(seed)
    return as_pattern_array(
        [ParamFilter(rng.standard_normal(basis.n), basis) for _ in range(int(np.prod(shape)))],
        shape,
    )


def test_kernel_sizes_paper_config():
    assert PAPER_GROUP.kernel_sizes == (6, 8, 10, 12)


def test_kernel_sizes_formula():
    g = GroupSpec(n_rot=1, n_scale=6, mu=1.25, base_p=8, h=0.5)
    for s, k in enumerate(g.kernel_sizes):
        assert k == 2 * int(np.ceil(8 * 1.25 ** s / 2))
        assert k % 2 == 0


def test_scale_weight_value():
    assert np.isclose(PAPER_GROUP.scale_weight(3), 1.25 ** -6)
    assert np.isclose(1.25 ** -6, 0.262144)


def test_scale_weight_ratio_exact():
    for b in range(3):
        assert np.isclose(
            PAPER_GROUP.scale_weight(b) / PAPER_GROUP.scale_weight(b + 1),
            1.25 ** 2,
            rtol=1e-14,
        )


def test_angles_closed_under_shift():
    angles = [PAPER_GROUP.angle(a) for a in range(8)]
    assert np.allclose(angles, [i * np.pi / 4 for i in range(8)])


# -- lifting bank ---------------------------------------------------------------


def test_lifting_trivial_group_is_plain_discretization():
    g = GroupSpec(n_rot=1, n_scale=1, mu=1.25, base_p=6, h=0.5)
    basis = make_fourier_basis(6, 0.5)
    pats = _filters((2, 3), basis)
    bank = expand_lifting_bank(pats, g)
    for o in range(2):
        for c in range(3):
            want = discretize(pats[o, c], TransformSpec(mu=1.25), 6)
            assert np.allclose(bank.expanded[0][o, 0, c], want)


def test_lifting_expanded_matches_definition():
    basis = make_fourier_basis(6, 0.5)
    pats = _filters((1, 2), basis)
    bank = expand_lifting_bank(pats, PAPER_GROUP)
    assert [blk.shape[-1] for blk in bank.expanded] == [6, 8, 10, 12]
    rng = np.random.default_rng(1)
    for _ in range(6):
        a = int(rng.integers(0, 8))
        b = int(rng.integers(0, 4))
        c = int(rng.integers(0, 2))
        k = PAPER_GROUP.kernel_sizes[b]
        want = PAPER_GROUP.scale_weight(b) * discretize(
            pats[0, c], PAPER_GROUP.element(a, b), k, masked=True
        )
        assert np.allclose(bank.expanded[b][0, a, c], want)


def test_lifting_basis_group_mismatch():
    basis = make_fourier_basis(4, 0.5)
    pats = _filters((1, 1), basis)
    with pytest.raises(InvalidArgument):
        expand_lifting_bank(pats, PAPER_GROUP)


def test_lifting_param_count_independent_of_group_size():
    n = 36
    assert count_shared_params(3, 1, PAPER_GROUP, "lifting") == 1 * 3 * n
    tiny = GroupSpec(n_rot=1, n_scale=1, mu=1.25, base_p=6, h=0.5)
    assert count_shared_params(3, 1, tiny, "lifting") == 1 * 3 * n


# -- group bank -------------------------------------------------------------------


def test_group_trivial_reduces_to_plain_conv_kernel():
    g = GroupSpec(n_rot=1, n_scale=1, mu=1.25, base_p=6, h=0.5)
    basis = make_fourier_basis(6, 0.5)
    pats = _filters((2, 2, 1, 1), basis)
    bank = expand_group_bank(pats, g)
    assert bank.expanded[0].shape == (2, 1, 2, 1, 1, 6, 6)
    for o in range(2):
        for c in range(2):
            want = discretize(pats[o, c, 0, 0], TransformSpec(mu=1.25), 6)
            assert np.allclose(bank.expanded[0][o, 0, c, 0, 0], want)


def test_group_truncation_zero_blocks():
    basis = make_fourier_basis(6, 0.5)
    pats = _filters((1, 1, 8, 4), basis)
    bank = expand_group_bank(pats, PAPER_GROUP)
    for b in range(4):
        blk = bank.expanded[b]
        # in-scale strictly below the out-scale is a truncated zero kernel
        assert np.all(blk[:, :, :, :, :b] == 0.0)
        if b < 3:
            assert np.abs(blk[:, :, :, :, b:]).max() > 0.0


def test_group_cyclic_shift_layout():
    """Moving one step along the out-rot axis shifts the in-rot axis by one
    and additionally rotates each kernel by one angle step."""
    basis = make_fourier_basis(6, 0.5)
    pats = _filters((1, 1, 8, 4), basis, seed=3)
    bank = expand_group_bank(pats, PAPER_GROUP)
    blk = bank.expanded[0]  # [o, a, c, a', b', k, k]
    for a in range(7):
        for a2 in range(8):
            lhs = blk[0, a + 1, 0, (a2 + 1) % 8, 0]
            # same relative offset, rotated by one extra step: recompute
            f = pats[0, 0, (a2 - a) % 8, 0]
            want = PAPER_GROUP.scale_weight(0) * discretize(
                f, PAPER_GROUP.element(a + 1, 0), 6, masked=True
            )
            assert np.allclose(lhs, want)


def test_group_weight_sharing_touch_count():
    """Mutating one pattern's coefficient changes exactly its n_rot*n_scale
    transformed copies and nothing else."""
    g = GroupSpec(n_rot=4, n_scale=2, mu=1.25, base_p=4, h=0.5)
    basis = make_fourier_basis(4, 0.5)
    pats = _filters((1, 1, 4, 2), basis, seed=5)
    idx = int(np.argmax(basis.mask_weights()))  # a coefficient the mask keeps

    def touched(da, db):
        before = expand_group_bank(pats, g)
        pats[0, 0, da, db].coefficients[idx] += 0.5
        after = expand_group_bank(pats, g)
        pats[0, 0, da, db].coefficients[idx] -= 0.5
        changed = 0
        for b in range(g.n_scale):
            diff = np.abs(after.expanded[b] - before.expanded[b]).max(axis=(-2, -1))
            changed += int((diff > 1e-12).sum())
        return changed

    # a zero-scale-offset pattern has one transformed copy per group element
    assert touched(2, 0) == g.n_rot * g.n_scale
    # positive offsets lose the copies the scale truncation removes
    assert touched(2, 1) == g.n_rot * (g.n_scale - 1)


def test_param_count_examples():
    assert count_shared_params(2, 2, PAPER_GROUP, "group") == 2 * 2 * 32 * 36 == 4608
    assert count_shared_params(3, 1, PAPER_GROUP, "lifting") == 108
    unshared = count_unshared_params(2, 2, PAPER_GROUP, "group")
    assert unshared == 32 * count_shared_params(2, 2, PAPER_GROUP, "group")


def test_param_ratio_is_group_size():
    for g in (PAPER_GROUP, GroupSpec(n_rot=8, n_scale=1), GroupSpec(n_rot=1, n_scale=4)):
        shared = count_shared_params(4, 2, g, "group")
        unshared = count_unshared_params(4, 2, g, "group")
        assert unshared == g.size * shared


def test_bad_layer_kind():
    with pytest.raises(InvalidArgument):
        count_shared_params(1, 1, PAPER_GROUP, "dense")


# -- checkpoint blob ---------------------------------------------------------------


def test_bank_blob_round_trip(tmp_path):
    g = GroupSpec(n_rot=4, n_scale=2, mu=1.25, base_p=4, h=0.5)
    basis = make_fourier_basis(4, 0.5)
    pats = _filters((2, 1, 4, 2), basis, seed=9)
    bank = expand_group_bank(pats, g)
    path = tmp_path / "bank.bin"
    save_bank(path, bank)
    back = load_bank(path, basis)
    assert back.group == g
    for b in range(g.n_scale):
        assert np.array_equal(back.expanded[b], bank.expanded[b])


def test_blob_header_layout(tmp_path):
    g = GroupSpec(n_rot=4, n_scale=2, mu=1.25, base_p=4, h=0.5)
    basis = make_fourier_basis(4, 0.5)
    bank = expand_lifting_bank(_filters((1, 1), basis), g)
    path = tmp_path / "b.bin"
    save_bank(path, bank)
    raw = path.read_bytes()
    assert raw[:4] == b"EQBK"
    import struct

    version, n_rot, n_scale, base_p = struct.unpack("<IIII", raw[4:20])
    mu, h = struct.unpack("<dd", raw[20:36])
    assert (version, n_rot, n_scale, base_p) == (1, 4, 2, 4)
    assert (mu, h) == (1.25, 0.5)
