# tests/test_posectx.py
import itertools

import numpy as np
import pytest

from correspondence_transfer.errors import BinRangeError, DegeneratePoseError, NoValidEntriesError
from correspondence_transfer.models import JointSet, PoseContext
from correspondence_transfer.posectx import (
    compute_pose_context, cyclic_bin_distance, pair_similarity, pose_similarity, pose_similarity_batch,
    similarity_terms, stack_contexts,
)
from correspondence_transfer.synth import CANONICAL_JOINTS, skeleton
from correspondence_transfer.utils import derive_rng


def _context(coords, valid=None):
    coords = np.asarray(coords, dtype=np.float64)
    if valid is None:
        return compute_pose_context(JointSet.from_coords(coords))
    return compute_pose_context(JointSet(coords=coords, valid=valid))


def _random_pose(seed):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 100, size=(14, 2)).astype(np.float64)


def test_descriptor_shape_and_bins():
    ctx = _context(CANONICAL_JOINTS)
    assert ctx.psi.shape == ctx.phi.shape == (14, 13)
    assert ctx.psi.min() >= 1 and ctx.psi.max() <= 8
    assert ctx.phi.min() >= 1 and ctx.phi.max() <= 8
    # the farthest pair lands in the last magnitude bin
    assert ctx.psi.max() == 8


def test_angle_bins_counterclockwise_on_screen():
    coords = np.zeros((14, 2))
    coords[1] = (10.0, 0.0)
    coords[2] = (0.0, -10.0)
    coords[3:] = (-3.0, 5.0)
    ctx = _context(coords)
    # joint 0 sees joint 1 straight right (bin 1) and joint 2 straight up (bin 3)
    assert ctx.phi[0, 0] == 1
    assert ctx.phi[0, 1] == 3


def test_invalid_joints_are_zeroed():
    valid = np.ones(14, dtype=bool)
    valid[4] = False
    ctx = _context(CANONICAL_JOINTS, valid)
    assert not ctx.psi[4].any() and not ctx.phi[4].any()
    assert ctx.psi[0, 3] == 0
    assert ctx.psi[0, 4] > 0


def test_degenerate_poses_rejected():
    valid = np.zeros(14, dtype=bool)
    valid[0] = True
    with pytest.raises(DegeneratePoseError):
        _context(CANONICAL_JOINTS, valid)
    with pytest.raises(DegeneratePoseError):
        _context(np.full((14, 2), 5.0))


@pytest.mark.parametrize("seed", range(5))
def test_self_similarity_is_exactly_one(seed):
    ctx = _context(_random_pose(seed))
    assert pose_similarity(ctx, ctx) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_similarity_is_symmetric(seed):
    a, b = _context(_random_pose(seed)), _context(_random_pose(seed + 100))
    assert pose_similarity(a, b) == pose_similarity(b, a)
    assert 0.0 < pose_similarity(a, b) <= 1.0


@pytest.mark.parametrize("seed", range(5))
def test_translation_and_scale_invariance(seed):
    coords = _random_pose(seed)
    base = _context(coords)
    moved = _context(coords * 2.0 + np.array([37.0, -11.0]))
    np.testing.assert_array_equal(base.psi, moved.psi)
    np.testing.assert_array_equal(base.phi, moved.phi)


def test_cyclic_distance_axioms():
    for a, b in itertools.product(range(1, 9), repeat=2):
        d = cyclic_bin_distance(a, b)
        assert d == cyclic_bin_distance(b, a)
        assert 0 <= d <= 16
        assert (d == 0) == (a == b)
    assert cyclic_bin_distance(1, 5) == 16
    assert cyclic_bin_distance(1, 8) == 1
    assert cyclic_bin_distance(2, 5) == 9


def test_cyclic_distance_vectorised():
    np.testing.assert_array_equal(cyclic_bin_distance([1, 2, 8], [8, 2, 4]), [1.0, 0.0, 16.0])


@pytest.mark.parametrize("bad", [(0, 3), (3, 9)])
def test_cyclic_distance_range(bad):
    with pytest.raises(BinRangeError):
        cyclic_bin_distance(*bad)


def test_similarity_terms_need_shared_entries():
    first = np.zeros(14, dtype=bool)
    first[[0, 1]] = True
    second = np.zeros(14, dtype=bool)
    second[[2, 3]] = True
    a = _context(CANONICAL_JOINTS, first)
    b = _context(CANONICAL_JOINTS, second)
    with pytest.raises(NoValidEntriesError):
        similarity_terms(a, b)


def test_pair_similarity_is_a_product():
    a, b, c, d = (_context(_random_pose(s)) for s in range(4))
    assert pair_similarity(a, b, c, d) == pytest.approx(pose_similarity(a, c) * pose_similarity(b, d))


def test_articulation_lowers_similarity():
    rng = derive_rng(0, 0)
    rest = _context(skeleton(2, 0, rng, articulated=True))
    same = _context(skeleton(2, 0, rng, articulated=True))
    swung = _context(skeleton(4, 0, rng, articulated=True))
    assert pose_similarity(rest, same) > pose_similarity(rest, swung)


def test_batch_matches_scalar():
    contexts = [_context(_random_pose(s)) for s in range(6)]
    valid = np.ones(14, dtype=bool)
    valid[[2, 9]] = False
    contexts.append(_context(_random_pose(50), valid))
    contexts.append(None)
    psi, phi = stack_contexts(contexts)
    query = contexts[0]

    batch = pose_similarity_batch(query, psi, phi)
    assert batch[-1] == 0.0
    for t, ctx in enumerate(contexts[:-1]):
        assert batch[t] == pytest.approx(pose_similarity(query, ctx), abs=1e-12)
    assert not pose_similarity_batch(None, psi, phi).any()


def _rotate_angles(ctx, steps):
    phi = np.where(ctx.phi > 0, (ctx.phi - 1 + steps) % 8 + 1, 0)
    return PoseContext(psi=ctx.psi, phi=phi)


@pytest.mark.parametrize("seed", range(10))
def test_one_bin_angle_rotation_is_symmetric(seed):
    a, b = _context(_random_pose(seed)), _context(_random_pose(seed + 100))
    _, base = similarity_terms(a, b)

    _, forward_a = similarity_terms(_rotate_angles(a, 1), b)
    _, backward_b = similarity_terms(a, _rotate_angles(b, -1))
    assert forward_a == backward_b
    _, both = similarity_terms(_rotate_angles(a, 1), _rotate_angles(b, 1))
    assert both == base

    # against itself, rotating either side costs exactly one bin step everywhere
    _, rotated_first = similarity_terms(_rotate_angles(a, 1), a)
    _, rotated_second = similarity_terms(a, _rotate_angles(a, 1))
    assert rotated_first == rotated_second == pytest.approx(np.exp(-1.0))
