import numpy as np
import pytest

from damagemap import data as D


def write_solid_ppm(path, rgb, h=5, w=7):
    D.write_image(path, np.tile(np.array(rgb, np.uint8), (h, w, 1)))


class TestCodec:
    def test_ppm_round_trip_bit_identical(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, (9, 13, 3), dtype=np.uint8)
        D.write_image(tmp_path / "a.ppm", px)
        t = D.load_image(tmp_path / "a.ppm")
        assert t.shape == (3, 9, 13) and t.min() >= 0 and t.max() <= 1
        D.write_image(tmp_path / "b.ppm", D.to_pixels(t))
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_ppm_header_with_comment(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
        np.testing.assert_array_equal(D.read_image(tmp_path / "c.ppm"), [[[1, 2, 3], [4, 5, 6]]])

    def test_png(self, tmp_path):
        px = np.random.default_rng(1).integers(0, 256, (4, 6, 3), dtype=np.uint8)
        D.write_image(tmp_path / "a.png", px)
        np.testing.assert_array_equal(D.read_image(tmp_path / "a.png"), px)

    def test_unsupported(self, tmp_path):
        (tmp_path / "x.ppm").write_bytes(b"P6\n2 2\n65535\n" + bytes(24))
        with pytest.raises(D.ImageFormatError, match="maxval"):
            D.read_image(tmp_path / "x.ppm")
        (tmp_path / "y.bmp").write_bytes(b"BM....")
        with pytest.raises(D.ImageFormatError):
            D.read_image(tmp_path / "y.bmp")
        from PIL import Image
        Image.new("L", (3, 3)).save(tmp_path / "g.png")
        with pytest.raises(D.ImageFormatError, match="mode"):
            D.read_image(tmp_path / "g.png")

    def test_truncated_ppm(self, tmp_path):
        (tmp_path / "t.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(D.ImageFormatError, match="truncated"):
            D.read_image(tmp_path / "t.ppm")

    def test_mask_round_trip(self, tmp_path):
        m = np.zeros((5, 6), np.uint8)
        m[1:3, 2:5] = 255
        for name in ("m.pgm", "m.png"):
            D.write_mask(tmp_path / name, m)
            np.testing.assert_array_equal(D.read_mask(tmp_path / name), m)


class TestPreprocess:
    def test_solid_colour(self, tmp_path):
        write_solid_ppm(tmp_path / "s.ppm", (255, 128, 0))
        x = D.preprocess(D.load_image(tmp_path / "s.ppm"), 224)
        assert x.shape == (3, 224, 224)
        for c, v in enumerate((255, 128, 0)):
            np.testing.assert_allclose(x[c], v / 255 - D.CHANNEL_MEAN[c], atol=1e-6)

    def test_same_size_resize_identity(self):
        img = np.random.default_rng(0).random((3, 224, 224))
        np.testing.assert_allclose(D.preprocess(img, 224, np.float64) + D.CHANNEL_MEAN[:, None, None], img,
                                   atol=1e-6)


class TestManifest:
    def make(self, tmp_path, rows, header="path,label"):
        for r in rows:
            name = r.split(",")[0]
            if name and not (tmp_path / name).exists():
                write_solid_ppm(tmp_path / name, (10, 20, 30))
        (tmp_path / "m.csv").write_text(header + "\n" + "\n".join(rows) + "\n")
        return tmp_path / "m.csv"

    def test_valid(self, tmp_path):
        path = self.make(tmp_path, ["a.ppm,severe", "b.ppm,mild", "c.ppm,none"])
        entries = D.load_manifest(path)
        assert [e.label for e in entries] == ["severe", "mild", "none"]
        assert entries[0].path == tmp_path / "a.ppm"

    def test_unknown_label_names_line(self, tmp_path):
        path = self.make(tmp_path, ["a.ppm,none", "b.ppm,flooded"])
        with pytest.raises(D.ManifestError, match=r"m\.csv:3: unknown label 'flooded'"):
            D.load_manifest(path)

    def test_missing_image(self, tmp_path):
        (tmp_path / "m.csv").write_text("path,label\nnope.ppm,none\n")
        with pytest.raises(D.ManifestError, match=":2: image not found"):
            D.load_manifest(tmp_path / "m.csv")

    def test_missing_file(self, tmp_path):
        with pytest.raises(D.ManifestError):
            D.load_manifest(tmp_path / "absent.csv")

    def test_merge(self, tmp_path):
        path = self.make(tmp_path, ["a.ppm,severe", "b.ppm,mild", "c.ppm,none"])
        entries = D.load_manifest(path, merge_labels=True)
        assert [e.label for e in entries] == ["damage", "damage", "no_damage"]
        assert [e.original_label for e in entries] == ["severe", "mild", "none"]

    def test_mask_column(self, tmp_path):
        D.write_mask(tmp_path / "k.pgm", np.zeros((5, 7), np.uint8))
        path = self.make(tmp_path, ["a.ppm,damage,k.pgm", "b.ppm,no_damage,"], header="path,label,mask")
        entries = D.load_manifest(path)
        assert entries[0].mask == tmp_path / "k.pgm" and entries[1].mask is None

    def test_write_round_trip(self, tmp_path):
        path = self.make(tmp_path, ["a.ppm,severe", "b.ppm,none"])
        entries = D.load_manifest(path, merge_labels=True)
        D.write_manifest(tmp_path / "o.csv", entries, labels="original")
        assert D.load_manifest(tmp_path / "o.csv") == D.load_manifest(path)


class TestSplit:
    def entries(self, counts):
        return [D.ManifestEntry(f"{label}{i}", label) for label, n in counts.items() for i in range(n)]

    def test_counts(self):
        train, test = D.split(self.entries({"damage": 5, "no_damage": 5}), D.SplitSpec(0.8, 1))
        assert (len(train), len(test)) == (8, 2)
        train, test = D.split(self.entries({"damage": 10}), D.SplitSpec(0.8, 1, stratified=False))
        assert (len(train), len(test)) == (8, 2)

    def test_stratified_proportions(self):
        train, test = D.split(self.entries({"damage": 60, "no_damage": 40}), D.SplitSpec(0.8, 3))
        assert sum(e.label == "damage" for e in train) == 48
        assert sum(e.label == "no_damage" for e in train) == 32

    @pytest.mark.parametrize("stratified", [True, False])
    def test_partition_and_determinism(self, stratified):
        entries = self.entries({"a": 7, "b": 13, "c": 4})
        spec = D.SplitSpec(0.8, 11, stratified)
        train, test = D.split(entries, spec)
        assert set(map(id, train)).isdisjoint(map(id, test))
        assert sorted(map(id, train + test)) == sorted(map(id, entries))
        assert D.split(entries, spec) == (train, test)

    def test_singleton_class_kept_in_train(self, caplog):
        train, _ = D.split(self.entries({"a": 5, "b": 1}), D.SplitSpec(0.8, 0))
        assert any(e.label == "b" for e in train)
        assert "class 'b'" in caplog.text

    def test_needs_two(self):
        with pytest.raises(ValueError):
            D.split(self.entries({"a": 1}))
        with pytest.raises(ValueError):
            D.SplitSpec(1.0)


class TestSynthetic:
    def test_deterministic(self, tmp_path):
        spec = D.SyntheticSpec(count=12, size=32, seed=5)
        m1 = D.generate_synthetic(tmp_path / "a", spec)
        m2 = D.generate_synthetic(tmp_path / "b", spec)
        assert m1.read_bytes() == m2.read_bytes()
        for sub in ("images", "masks"):
            for f in sorted((tmp_path / "a" / sub).iterdir()):
                assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()

    def test_masks_and_labels(self, tmp_path):
        spec = D.SyntheticSpec(count=40, size=32, seed=2)
        entries = D.load_manifest(D.generate_synthetic(tmp_path, spec))
        assert {e.label for e in entries} >= {"none"}
        assert any(e.label != "none" for e in entries)
        for e in entries:
            m = D.read_mask(e.mask)
            cov = np.mean(m == 255)
            if e.label == "none":
                assert cov == 0
            else:
                assert spec.min_coverage <= cov <= spec.max_coverage
                assert (cov <= spec.mild_limit) == (e.label == "mild")

    def test_class_mix(self, tmp_path):
        entries = D.load_manifest(D.generate_synthetic(tmp_path, D.SyntheticSpec(count=10, size=16, seed=0)),
                                  merge_labels=True)
        assert sum(e.label == "damage" for e in entries) == 5

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            D.SyntheticSpec(count=1)


def test_class_index_convention():
    assert D.class_index("damage", 2) == 0 and D.class_index("no_damage", 2) == 1
    assert D.class_label(2, 3) == "none"
    with pytest.raises(ValueError):
        D.class_index("mild", 2)
