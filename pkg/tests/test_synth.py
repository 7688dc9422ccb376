"""Synthetic benchmark generator: determinism, split layout, class
structure, the sealed answer file, and the domain shift itself."""

import numpy as np
import pytest

from meltpool_da import synth
from meltpool_da.errors import ContractError


def small_spec(**kw):
    base = dict(train_per_class=5, val_per_class=3, test_per_class=3, seed=0)
    base.update(kw)
    return synth.SyntheticDomainSpec(**base)


def test_render_deterministic():
    spec = small_spec()
    a = synth.render_melt_pool(spec, "normal", 7)
    b = synth.render_melt_pool(spec, "normal", 7)
    assert np.array_equal(a, b)
    c = synth.render_melt_pool(spec, "normal", 8)
    assert not np.array_equal(a, c)


def test_render_shape_and_range():
    spec = small_spec()
    for cls in ("normal", "abnormal"):
        img = synth.render_melt_pool(spec, cls, 0)
        assert img.shape == (80, 80)
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0


def test_render_rejects_unknown_class():
    with pytest.raises(ContractError):
        synth.render_melt_pool(small_spec(), "weird", 0)


def test_normal_noiseless_render_is_unimodal():
    spec = small_spec(noise_sigma=0.0, flare_prob=0.0)
    img = synth.render_melt_pool(spec, "normal", 3, noiseless=True)
    assert synth.count_local_maxima(img) == 1


def test_abnormal_spatter_adds_local_maxima():
    # force the spatter mode by scanning seeds for one that drew it, then
    # check the local-maxima oracle on the noiseless render
    spec = small_spec(noise_sigma=0.0, flare_prob=0.0,
                      spatter_count=(3, 3), spatter_intensity=0.9)
    found = 0
    for seed in range(40):
        img = synth.render_melt_pool(spec, "abnormal", seed, noiseless=True)
        if synth.count_local_maxima(img) >= 3:
            found += 1
    assert found > 0


def test_spec_validation():
    with pytest.raises(ContractError):
        synth.SyntheticDomainSpec(diameter_mean=2.0)
    with pytest.raises(ContractError):
        synth.SyntheticDomainSpec(noise_sigma=-0.1)
    with pytest.raises(ContractError):
        synth.SyntheticDomainSpec(train_per_class=-1)


def test_generate_domain_pair_layout():
    bench = synth.generate_domain_pair(small_spec(), small_spec(seed=1))
    sets = bench.datasets()
    assert len(sets["src_train"]) == 10
    assert sets["src_train"].labeled
    assert int(np.sum(sets["src_train"].labels == 0)) == 5
    assert sets["tgt_train"].labels is None
    assert len(bench.sealed_labels) == len(sets["tgt_train"])
    for ds in sets.values():
        ds.validate()


def test_generate_table2_counts():
    src = synth.default_source_spec()
    tgt = synth.default_target_spec()
    bench = synth.generate_domain_pair(src, tgt, table2_counts=True)
    assert len(bench.source_train) == 646
    assert int(np.sum(bench.source_train.labels == 1)) == 323
    assert len(bench.target_train) == 5819
    for ds in (bench.source_val, bench.source_test, bench.target_val, bench.target_test):
        assert len(ds) == 100
        assert int(np.sum(ds.labels == 0)) == 50


def test_generation_reproducible_digest(tmp_path):
    a = synth.generate_domain_pair(small_spec(), small_spec(seed=1))
    b = synth.generate_domain_pair(small_spec(), small_spec(seed=1))
    for da, db in zip(a.datasets().values(), b.datasets().values()):
        assert np.array_equal(da.images, db.images)
    assert synth.dataset_digest(a.source_train) == synth.dataset_digest(b.source_train)


def test_sealed_labels_consistent_and_ids_opaque():
    """Sealed labels stay class-balanced and the unlabeled set's ids carry
    no class information."""
    bench = synth.generate_domain_pair(small_spec(), small_spec(seed=1))
    assert int(np.sum(bench.sealed_labels == 1)) == len(bench.sealed_labels) // 2
    for id_ in bench.target_train.ids:
        assert "normal" not in id_
    # the shuffled images still pair with their sealed labels: re-rendering
    # the target spec reproduces each image at exactly one (class, index)
    spec = small_spec(seed=1)
    total = len(bench.sealed_labels)
    half = total // 2
    by_class = {
        0: {synth.render_melt_pool(spec, "normal", s).tobytes()
            for s in range(total - half)},
        1: {synth.render_melt_pool(spec, "abnormal", s).tobytes()
            for s in range(total - half, total)},
    }
    for img, label in zip(bench.target_train.images, bench.sealed_labels):
        assert img.tobytes() in by_class[int(label)]


def test_sealed_file_roundtrip(tmp_path):
    bench = synth.generate_domain_pair(small_spec(), small_spec(seed=1))
    p = tmp_path / "sealed.mpsl"
    synth.save_sealed_labels(bench.sealed_labels, bench.target_train.ids, p)
    labels, ids = synth.load_sealed_labels(p)
    assert np.array_equal(labels, bench.sealed_labels)
    assert ids == bench.target_train.ids


def test_default_shift_changes_statistics():
    """The shipped domain shift dims and shrinks the target images."""
    src = synth.default_source_spec()
    tgt = synth.default_target_spec()
    src_imgs = np.stack([synth.render_melt_pool(src, "normal", s) for s in range(20)])
    tgt_imgs = np.stack([synth.render_melt_pool(tgt, "normal", s) for s in range(20)])
    # target pools are dimmer and cover fewer bright pixels
    assert tgt_imgs.mean() < src_imgs.mean()
    assert np.mean(tgt_imgs > 0.5) < np.mean(src_imgs > 0.5)


def test_spec_from_dict_roundtrip():
    spec = synth.spec_from_dict({"diameter_mean": "20", "noise_sigma": "0.1",
                                 "train_per_class": "7", "seed": "3"})
    assert spec.diameter_mean == 20.0
    assert spec.noise_sigma == 0.1
    assert spec.train_per_class == 7


def test_spec_from_dict_unknown_key():
    from meltpool_da.errors import DataError
    with pytest.raises(DataError):
        synth.spec_from_dict({"wavelength": "1.0"})
