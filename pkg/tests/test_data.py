"""Netpbm I/O, corpus generation, augmentation alignment, PK sampling."""

import numpy as np
import pytest

from trireid.data import (
    Manifest,
    ManifestRecord,
    augment,
    generate_dataset,
    hflip,
    load_sample,
    pk_sample_batch,
    render_sample,
)
from trireid.errors import ConfigError, ContractError, ParseError
from trireid.netpbm import read_pgm, read_ppm, write_pgm, write_ppm


class TestNetpbm:
    def test_ppm_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(3, 5, 7), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        np.testing.assert_array_equal(read_ppm(path), img)
        blob = path.read_bytes()
        write_ppm(path, read_ppm(path))
        assert path.read_bytes() == blob

    def test_pgm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(4, 6), dtype=np.uint8)
        path = tmp_path / "m.pgm"
        write_pgm(path, img)
        np.testing.assert_array_equal(read_pgm(path), img)

    def test_truncated_file_is_parse_error(self, tmp_path):
        path = tmp_path / "t.ppm"
        write_ppm(path, np.zeros((3, 4, 4), dtype=np.uint8))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ParseError):
            read_ppm(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n1 1\n255\n000")
        with pytest.raises(ParseError, match="magic"):
            read_ppm(path)

    def test_unsupported_maxval(self, tmp_path):
        path = tmp_path / "deep.pgm"
        path.write_bytes(b"P5\n2 2\n65535\n" + b"\x00" * 8)
        with pytest.raises(ParseError, match="max value"):
            read_pgm(path)

    def test_comments_in_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n" + b"\x01\x02\x03\x04")
        np.testing.assert_array_equal(read_pgm(path), [[1, 2], [3, 4]])

    def test_parse_error_carries_offset(self, tmp_path):
        path = tmp_path / "o.ppm"
        path.write_bytes(b"P6\nxx 2\n255\n")
        with pytest.raises(ParseError) as err:
            read_ppm(path)
        assert err.value.offset is not None


class TestRendering:
    def test_deterministic(self):
        a = render_sample(7, identity=3, index=2, camera=1)
        b = render_sample(7, identity=3, index=2, camera=1)
        for mod in a.images:
            np.testing.assert_array_equal(a.images[mod], b.images[mod])
        np.testing.assert_array_equal(a.fg_mask, b.fg_mask)

    def test_coverage_contract(self):
        for identity in range(12):
            for index in range(4):
                s = render_sample(3, identity, index, camera=0)
                cov = s.fg_mask.mean()
                assert 0.10 <= cov <= 0.60, (identity, index, cov)

    def test_modalities_share_extents_and_differ(self):
        s = render_sample(5, 1, 0, 0)
        shapes = {m: img.shape for m, img in s.images.items()}
        assert set(shapes.values()) == {(3, 64, 32)}
        assert not np.allclose(s.images["rgb"], s.images["tir"])

    def test_same_identity_masks_overlap_more(self):
        def iou(a, b):
            return (a & b).sum() / max((a | b).sum(), 1)

        same, cross = [], []
        for identity in range(6):
            m0 = render_sample(11, identity, 0, 0).fg_mask
            m1 = render_sample(11, identity, 1, 1).fg_mask
            same.append(iou(m0, m1))
            other = render_sample(11, (identity + 1) % 6, 0, 0).fg_mask
            cross.append(iou(m0, other))
        assert np.mean(same) > np.mean(cross)

    def test_tir_foreground_is_hot(self):
        s = render_sample(9, 2, 0, 0)
        tir = s.images["tir"][0]
        assert tir[s.fg_mask].mean() > tir[~s.fg_mask].mean() + 0.3


class TestGeneration:
    def test_corpus_layout_and_determinism(self, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        man_a = generate_dataset(42, n_ids=4, samples_per_id=4, out_dir=out_a)
        generate_dataset(42, n_ids=4, samples_per_id=4, out_dir=out_b)
        assert len(man_a.records) == 16
        for rel in sorted(p.relative_to(out_a) for p in out_a.rglob("*") if p.is_file()):
            assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes(), rel

    def test_split_protocol(self, tmp_path):
        man = generate_dataset(1, n_ids=6, samples_per_id=8, out_dir=tmp_path / "c")
        train_ids = set(man.identities("train"))
        query_ids = set(man.identities("query"))
        gallery_ids = set(man.identities("gallery"))
        assert train_ids.isdisjoint(query_ids | gallery_ids)
        assert query_ids == gallery_ids  # overlap by construction

    def test_min_ids_enforced(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_dataset(0, n_ids=2, samples_per_id=8, out_dir=tmp_path / "d")

    def test_load_sample_roundtrip(self, tmp_path):
        out = tmp_path / "e"
        man = generate_dataset(13, n_ids=4, samples_per_id=4, out_dir=out)
        rec = man.records[0]
        s = load_sample(out, rec)
        assert s.identity == rec.id and s.camera == rec.camera
        assert s.images["rgb"].shape == (3, 64, 32)
        assert s.images["rgb"].max() <= 1.0 and s.images["rgb"].min() >= 0.0
        fresh = render_sample(13, rec.id, 0, rec.camera)
        # quantization to uint8 loses at most half a step
        assert np.abs(s.images["rgb"] - fresh.images["rgb"]).max() <= 0.5 / 255 + 1e-12

    def test_manifest_roundtrip(self, tmp_path):
        man = Manifest([ManifestRecord("images/id000_s000", 0, 1, "train")])
        path = tmp_path / "m.jsonl"
        man.save(path)
        loaded = Manifest.load(path)
        assert loaded.records == man.records

    def test_manifest_bad_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"path": "x"}\n')
        with pytest.raises(ParseError):
            Manifest.load(path)


class TestAugment:
    def test_flip_is_involution(self):
        s = render_sample(21, 0, 0, 0)
        twice = hflip(hflip(s))
        np.testing.assert_array_equal(twice.images["nir"], s.images["nir"])
        np.testing.assert_array_equal(twice.fg_mask, s.fg_mask)

    def test_mask_stays_aligned(self):
        s = render_sample(22, 1, 0, 0)
        # TIR foreground is hot, so the mask must keep marking hot pixels
        for seed in range(8):
            a = augment(s, seed)
            tir = a.images["tir"][0]
            if a.fg_mask.sum() == 0:
                continue
            assert tir[a.fg_mask].mean() > tir[~a.fg_mask].mean() + 0.2

    def test_deterministic(self):
        s = render_sample(23, 2, 1, 1)
        a = augment(s, 99)
        b = augment(s, 99)
        np.testing.assert_array_equal(a.images["rgb"], b.images["rgb"])
        np.testing.assert_array_equal(a.fg_mask, b.fg_mask)

    def test_erased_region_removed_from_mask(self):
        s = render_sample(24, 3, 0, 0)
        saw_erase = False
        for seed in range(30):
            a = augment(s, seed)
            if a.erased is None:
                continue
            saw_erase = True
            ey, ex, eh, ew = a.erased
            box = a.fg_mask[ey:ey + eh, ex:ex + ew]
            assert not box.any()  # foreground never survives inside the box
            for k, img in a.images.items():
                region = img[:, ey:ey + eh, ex:ex + ew]
                # the fill is one constant per channel
                assert np.ptp(region.reshape(3, -1), axis=1).max() == 0.0
        assert saw_erase

    def test_shapes_preserved(self):
        s = render_sample(25, 0, 0, 0)
        a = augment(s, 5)
        assert a.images["rgb"].shape == s.images["rgb"].shape
        assert a.fg_mask.shape == s.fg_mask.shape


class TestPKSampling:
    def _manifest(self):
        recs = []
        for identity in range(6):
            for idx in range(5):
                recs.append(ManifestRecord(f"images/id{identity}_s{idx}", identity,
                                           idx % 2, "train"))
        return Manifest(recs)

    def test_batch_size_and_balance(self):
        batch = pk_sample_batch(self._manifest(), 4, 4, seed=0)
        assert len(batch) == 16
        ids, counts = np.unique([r.id for r in batch], return_counts=True)
        assert len(ids) == 4
        assert (counts == 4).all()

    def test_paper_scale_arithmetic(self):
        recs = [ManifestRecord(f"i/{i}_{j}", i, 0, "train")
                for i in range(8) for j in range(16)]
        batch = pk_sample_batch(Manifest(recs), 8, 16, seed=1)
        assert len(batch) == 128

    def test_deterministic(self):
        a = pk_sample_batch(self._manifest(), 3, 4, seed=7)
        b = pk_sample_batch(self._manifest(), 3, 4, seed=7)
        assert [r.path for r in a] == [r.path for r in b]

    def test_replacement_when_short(self):
        recs = [ManifestRecord(f"i/{i}_{j}", i, 0, "train")
                for i in range(4) for j in range(2)]
        batch = pk_sample_batch(Manifest(recs), 4, 5, seed=3)
        assert len(batch) == 20

    def test_too_few_identities(self):
        with pytest.raises(ContractError):
            pk_sample_batch(self._manifest(), 7, 2, seed=0)
