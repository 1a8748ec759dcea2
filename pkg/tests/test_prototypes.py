import numpy as np
import pytest

from protoreg.autodiff import DTensor
from protoreg.prototypes import (avgpool_distance, distances, init_prototypes,
                                 project)
from protoreg.transport import OTConfig, emd, pairwise_cost, sinkhorn_log

SHAPE = (2, 2, 3)
OT = OTConfig(eps=0.1, max_iters=200, marginal_tol=1e-8)


def test_label_spacing():
    pset = init_prototypes(3, 0.0, 10.0, SHAPE)
    np.testing.assert_array_equal(pset.labels, [0.0, 5.0, 10.0])


def test_label_spacing_day_range():
    # 100 prototypes spread over a 98..217 day range step in 119/99 units
    pset = init_prototypes(100, 98.0, 217.0, SHAPE)
    steps = np.diff(pset.labels)
    np.testing.assert_allclose(steps, 119.0 / 99.0, rtol=1e-12)
    assert pset.labels[0] == 98.0 and pset.labels[-1] == 217.0


def test_init_range_and_validation():
    pset = init_prototypes(5, 0.0, 1.0, SHAPE, rng_seed=3)
    assert np.all(pset.protos.data > 0.2) and np.all(pset.protos.data < 0.8)
    assert pset.s == 1.0
    with pytest.raises(ValueError):
        init_prototypes(1, 0.0, 1.0, SHAPE)
    with pytest.raises(ValueError):
        init_prototypes(3, 2.0, 1.0, SHAPE)


def test_distance_vector_shape_and_self_distance():
    # distinct patches far apart in feature space: off-diagonal costs are
    # large, so the entropic self-distance collapses below 1e-6
    shape = (2, 2, 12)
    pset = init_prototypes(2, 0.0, 1.0, shape, rng_seed=1)
    patterned = np.empty(shape)
    for i, v in enumerate((0.1, 0.9, 0.1, 0.9)):
        patterned[divmod(i, 2)] = v if i < 2 else 1.0 - v
    pset.protos.data[1] = patterned
    dv = distances(DTensor(patterned.copy()), pset, OT)
    assert dv.d.shape == (2,)
    assert dv.d.data[1] <= 1e-6          # distance to itself
    assert dv.d.data[0] > dv.d.data[1]


def test_distances_match_manual_chain():
    pset = init_prototypes(2, 0.0, 1.0, SHAPE, rng_seed=2)
    single = init_prototypes(2, 0.0, 1.0, SHAPE, rng_seed=2)
    z = np.random.default_rng(5).uniform(0.3, 0.7, size=SHAPE)
    # single prototype: same chain computed by hand
    C = pairwise_cost(DTensor(z), DTensor(pset.protos.data[0].copy()))
    manual = emd(C, sinkhorn_log(C, OT)).item()
    dv = distances(DTensor(z), single, OT)
    # batched solve over one sample x two prototypes shares the iteration
    # schedule; compare against a matching batched manual chain
    zb = DTensor(z).reshape((1, 1) + SHAPE)
    pb = DTensor(pset.protos.data).reshape((1, 2) + SHAPE)
    Cb = pairwise_cost(zb, pb)
    db = emd(Cb, sinkhorn_log(Cb, OT)).data[0]
    np.testing.assert_array_equal(dv.d.data, db)
    # and the one-prototype batch equals the fully manual single chain
    lone = init_prototypes(2, 0.0, 1.0, SHAPE, rng_seed=2)
    lone.protos = DTensor(pset.protos.data[:1].copy(), requires_grad=True)
    lone.labels = lone.labels[:1]
    dv1 = distances(DTensor(z), lone, OT)
    np.testing.assert_allclose(dv1.d.data[0], manual, rtol=0, atol=1e-12)


def test_distances_symmetric_in_arguments():
    pset = init_prototypes(2, 0.0, 1.0, SHAPE, rng_seed=4)
    z = np.random.default_rng(6).uniform(0.3, 0.7, size=SHAPE)
    cfg = OTConfig(eps=0.1, max_iters=2000, marginal_tol=1e-10)
    C = pairwise_cost(DTensor(z), DTensor(pset.protos.data[0].copy()))
    Ct = pairwise_cost(DTensor(pset.protos.data[0].copy()), DTensor(z))
    a = emd(C, sinkhorn_log(C, cfg)).item()
    b = emd(Ct, sinkhorn_log(Ct, cfg)).item()
    assert abs(a - b) <= 1e-9


def test_avgpool_distance():
    pset = init_prototypes(2, 0.0, 1.0, (2, 2, 1), rng_seed=7)
    pset.protos.data[0] = 0.3
    pset.protos.data[1] = 0.7
    dv = avgpool_distance(DTensor(np.full((2, 2, 1), 0.3)), pset)
    np.testing.assert_allclose(dv.d.data, [0.0, 0.4], atol=1e-15)
    # random case against the mean-then-norm oracle
    rng = np.random.default_rng(8)
    z = rng.uniform(size=(2, 2, 3))
    pset = init_prototypes(3, 0.0, 1.0, (2, 2, 3), rng_seed=9)
    dv = avgpool_distance(DTensor(z), pset)
    for k in range(3):
        expected = np.linalg.norm(z.mean(axis=(0, 1)) - pset.protos.data[k].mean(axis=(0, 1)))
        np.testing.assert_allclose(dv.d.data[k], expected, atol=1e-12)


def test_project_single_image():
    pset = init_prototypes(3, 0.0, 1.0, SHAPE, rng_seed=10)
    lat = np.random.default_rng(11).uniform(0.3, 0.7, size=SHAPE)
    log = project(pset, [(lat, 17)], OT)
    for k in range(3):
        np.testing.assert_array_equal(pset.protos.data[k], lat)
        assert log.entries[k].sample_id == 17


def test_project_identity_distance_zero():
    # separated patches keep the entropic self-distance at the 1e-6 level
    shape = (2, 2, 12)
    pset = init_prototypes(2, 0.0, 1.0, shape, rng_seed=12)
    lat0 = np.empty(shape)
    for i, v in enumerate((0.1, 0.9, 0.9, 0.1)):
        lat0[divmod(i, 2)] = v
    pset.protos.data[0] = lat0
    other = np.random.default_rng(13).uniform(0.3, 0.7, size=shape)
    log = project(pset, [(lat0.copy(), 0), (other, 1)], OT)
    assert log.entries[0].sample_id == 0
    assert log.entries[0].distance <= 1e-6
    np.testing.assert_array_equal(pset.protos.data[0], lat0)


def test_project_argmin_matches_brute_force():
    rng = np.random.default_rng(14)
    pset = init_prototypes(3, 0.0, 1.0, SHAPE, rng_seed=15)
    latents = [(rng.uniform(0.3, 0.7, size=SHAPE), sid) for sid in (3, 1, 4, 0, 2)]
    protos_before = pset.protos.data.copy()
    log = project(pset, latents, OT)
    # brute-force table with the same metric
    by_id = sorted(latents, key=lambda t: t[1])
    for k in range(3):
        best_sid, best_d = None, np.inf
        for lat, sid in by_id:
            C = pairwise_cost(DTensor(lat), DTensor(protos_before[k]))
            d = emd(C, sinkhorn_log(C, OT)).item()
            if d < best_d - 1e-12:
                best_sid, best_d = sid, d
        assert log.entries[k].sample_id == best_sid
    # bit-exact copies of the chosen latents
    for k in range(3):
        src = [lat for lat, sid in latents if sid == log.entries[k].sample_id][0]
        np.testing.assert_array_equal(pset.protos.data[k], src)


def test_project_empty_errors():
    pset = init_prototypes(2, 0.0, 1.0, SHAPE)
    with pytest.raises(ValueError):
        project(pset, [], OT)


def test_labels_immutable_under_training_ops():
    pset = init_prototypes(4, 0.0, 9.0, SHAPE, rng_seed=16)
    labels_before = pset.labels.copy()
    z = np.random.default_rng(17).uniform(0.3, 0.7, size=SHAPE)
    dv = distances(DTensor(z), pset, OTConfig(eps=0.1, max_iters=25))
    (dv.d * pset.s_tensor()).sum().backward()
    pset.protos.data -= 0.01 * pset.protos.grad
    project(pset, [(z, 0)], OT)
    np.testing.assert_array_equal(pset.labels, labels_before)