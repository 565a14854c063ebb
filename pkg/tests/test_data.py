import numpy as np
import pytest

from sfmamba.data import (
    Dataset,
    DomainSpec,
    generate_domain,
    load_dataset,
    make_benchmark_pair,
    sample_prototypes,
    save_dataset,
)


def small_spec(**overrides):
    rng = np.random.default_rng(0)
    protos = sample_prototypes(8, 6, rng)
    base = dict(
        n_classes=4, grid=(4, 4), patch_dim=6,
        class_protos=protos[:4], background_protos=protos[4:],
        spurious_strength=0.9, noise_std=0.2, blob_size=(3, 5), seed=1,
    )
    base.update(overrides)
    return DomainSpec(**base)


def test_prototypes_respect_min_cosine_distance():
    rng = np.random.default_rng(1)
    protos = sample_prototypes(8, 6, rng)
    for i in range(8):
        for j in range(i + 1, 8):
            cos = protos[i] @ protos[j] / (np.linalg.norm(protos[i]) * np.linalg.norm(protos[j]))
            assert 1.0 - cos >= 0.2 - 1e-12


def test_noiseless_matched_generation_reproduces_prototypes():
    spec = small_spec(noise_std=0.0, spurious_strength=1.0)
    ds = generate_domain(spec, 8)
    for i in range(8):
        label = ds.labels[i]
        fg = ds.masks[i]
        assert np.allclose(ds.patches[i][fg], spec.class_protos[label], atol=1e-12)
        assert np.allclose(ds.patches[i][~fg], spec.background_protos[label], atol=1e-12)


def test_zero_spurious_strength_forces_mismatch():
    spec = small_spec(n_classes=2, noise_std=0.0, spurious_strength=0.0)
    spec.class_protos = spec.class_protos[:2]
    spec.background_protos = spec.background_protos[:2]
    ds = generate_domain(spec, 6)
    for i in range(6):
        other = 1 - ds.labels[i]
        assert np.allclose(ds.patches[i][~ds.masks[i]], spec.background_protos[other], atol=1e-12)


def test_generation_is_deterministic():
    a = generate_domain(small_spec(), 12)
    b = generate_domain(small_spec(), 12)
    assert np.array_equal(a.patches, b.patches)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.masks, b.masks)


def test_class_counts_balanced_within_one():
    ds = generate_domain(small_spec(), 14)
    counts = np.bincount(ds.labels, minlength=4)
    assert counts.max() - counts.min() <= 1


def test_blobs_connected_and_sized():
    ds = generate_domain(small_spec(), 10)
    for mask in ds.masks:
        size = mask.sum()
        assert 3 <= size <= 5
        # BFS connectivity over 4-neighbors
        cells = {tuple(c) for c in np.argwhere(mask)}
        start = next(iter(cells))
        seen, frontier = {start}, [start]
        while frontier:
            r, c = frontier.pop()
            for nb in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
                if nb in cells and nb not in seen:
                    seen.add(nb)
                    frontier.append(nb)
        assert seen == cells


def test_generation_guards():
    with pytest.raises(ValueError, match="at least"):
        generate_domain(small_spec(), 2)
    with pytest.raises(ValueError, match="blob"):
        generate_domain(small_spec(blob_size=(3, 99)), 8)
    with pytest.raises(ValueError, match="spurious"):
        DomainSpec(spurious_strength=1.5)


def test_affine_shift_applied():
    spec = small_spec(noise_std=0.0, spurious_strength=1.0)
    shifted = small_spec(noise_std=0.0, spurious_strength=1.0,
                         shift_scale=np.full(6, 2.0), shift_offset=np.full(6, -1.0))
    a = generate_domain(spec, 8)
    b = generate_domain(shifted, 8)
    assert np.allclose(b.patches, a.patches * 2.0 - 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# benchmark pair

def test_pair_shares_class_prototypes():
    src, tgt = make_benchmark_pair(3, n_source=16, n_target=16)
    assert np.array_equal(src.spec.class_protos, tgt.spec.class_protos)
    assert np.array_equal(src.spec.background_protos, tgt.spec.background_protos)
    assert src.spec.spurious_strength == 0.9
    assert tgt.spec.spurious_strength == 0.25


def test_pair_background_correlation_counts():
    src, tgt = make_benchmark_pair(4, n_source=80, n_target=80)

    def matched_fraction(ds):
        hits = 0
        for i in range(len(ds)):
            bg_mean = ds.patches[i][~ds.masks[i]].mean(axis=0)
            # undo the affine shift before matching prototypes
            bg_mean = (bg_mean - ds.spec.shift_offset) / ds.spec.shift_scale
            sims = ds.spec.background_protos @ bg_mean / (
                np.linalg.norm(ds.spec.background_protos, axis=1) * np.linalg.norm(bg_mean)
            )
            hits += int(np.argmax(sims) == ds.labels[i])
        return hits / len(ds)

    assert matched_fraction(src) > 0.8
    assert matched_fraction(tgt) < 0.45


def test_background_probe_transfers_badly():
    # the spurious channel: a linear probe on background-mean features nails
    # the source domain and lands near chance on the target domain
    src, tgt = make_benchmark_pair(5, n_source=96, n_target=96)

    def bg_features(ds):
        return np.stack([ds.patches[i][~ds.masks[i]].mean(axis=0) for i in range(len(ds))])

    xs, xt = bg_features(src), bg_features(tgt)
    onehot = np.eye(4)[src.labels]
    w, *_ = np.linalg.lstsq(np.hstack([xs, np.ones((len(xs), 1))]), onehot, rcond=None)
    acc_src = (np.argmax(np.hstack([xs, np.ones((len(xs), 1))]) @ w, 1) == src.labels).mean()
    acc_tgt = (np.argmax(np.hstack([xt, np.ones((len(xt), 1))]) @ w, 1) == tgt.labels).mean()
    assert acc_src > 0.8
    assert acc_tgt < 0.45


# ---------------------------------------------------------------------------
# persistence

def test_save_load_round_trip(tmp_path):
    ds = generate_domain(small_spec(), 10)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.patches, ds.patches)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.masks, ds.masks)
    assert back.spec.spurious_strength == ds.spec.spurious_strength
    assert back.spec.blob_size == ds.spec.blob_size
    # second save of the loaded dataset is byte-identical
    save_dataset(back, tmp_path / "e")
    for name in ("patches.tnsr", "labels.tnsr", "masks.tnsr", "manifest.txt"):
        assert (tmp_path / "d" / name).read_bytes() == (tmp_path / "e" / name).read_bytes()


def test_load_rejects_missing_file(tmp_path):
    ds = generate_domain(small_spec(), 8)
    save_dataset(ds, tmp_path / "d")
    (tmp_path / "d" / "labels.tnsr").unlink()
    with pytest.raises(FileNotFoundError, match="labels"):
        load_dataset(tmp_path / "d")


def test_load_rejects_count_disagreement(tmp_path):
    from sfmamba.tensor import Tensor, save_tensor

    ds = generate_domain(small_spec(), 8)
    save_dataset(ds, tmp_path / "d")
    save_tensor(tmp_path / "d" / "labels.tnsr", Tensor(np.zeros(5)))
    with pytest.raises(ValueError, match="disagreement"):
        load_dataset(tmp_path / "d")


def test_load_rejects_class_count_mismatch(tmp_path):
    ds = generate_domain(small_spec(), 8)
    save_dataset(ds, tmp_path / "d")
    manifest = (tmp_path / "d" / "manifest.txt").read_text()
    (tmp_path / "d" / "manifest.txt").write_text(manifest.replace("n_classes = 4", "n_classes = 2"))
    with pytest.raises(ValueError, match="n_classes"):
        load_dataset(tmp_path / "d")


def test_manifest_rejects_malformed_lines(tmp_path):
    ds = generate_domain(small_spec(), 8)
    save_dataset(ds, tmp_path / "d")
    path = tmp_path / "d" / "manifest.txt"
    path.write_text(path.read_text() + "not a pair\n")
    with pytest.raises(ValueError, match="malformed"):
        load_dataset(tmp_path / "d")
