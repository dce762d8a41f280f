import gzip
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localsgd.dataio import (
    DATA_DIR_ENV,
    Dataset,
    LibsvmFormatError,
    ManifestError,
    Regime,
    concat_datasets,
    generate_synthetic,
    load_dataset,
    parse_libsvm,
    parse_manifest,
    partition,
    sha256_of,
    to_libsvm,
)


class TestParse:
    def test_basic_line(self):
        ds = parse_libsvm("+1 1:0.5 3:2.0\n")
        assert ds.n == 1 and ds.dim == 3
        s = ds.sample(0)
        assert s.label == 1.0
        assert list(s.features.indices) == [0, 2]
        assert list(s.features.values) == [0.5, 2.0]

    def test_zero_one_labels(self):
        ds = parse_libsvm("0 2:1.0\n1 1:1.0\n")
        assert list(ds.labels) == [-1.0, 1.0]
        assert ds.dim == 2

    def test_one_two_labels(self):
        ds = parse_libsvm("2 1:1.0\n1 1:1.0\n")
        assert list(ds.labels) == [1.0, -1.0]

    def test_unsupported_labels(self):
        with pytest.raises(LibsvmFormatError):
            parse_libsvm("3 1:1.0\n7 1:1.0\n")

    def test_order_preserved(self):
        text = "".join(f"+1 1:{float(i)}\n" for i in range(1, 6))
        ds = parse_libsvm(text)
        vals = [ds.sample(i).features.values[0] for i in range(5)]
        assert vals == [1.0, 2.0, 3.0, 4.0, 5.0]

    def test_malformed_line_reports_number(self):
        with pytest.raises(LibsvmFormatError, match="line 2"):
            parse_libsvm("+1 1:1.0\n+1 1:oops\n")

    def test_nonincreasing_indices(self):
        with pytest.raises(LibsvmFormatError, match="line 1"):
            parse_libsvm("+1 3:1.0 2:1.0\n")

    def test_nonnumeric_label(self):
        with pytest.raises(LibsvmFormatError, match="label"):
            parse_libsvm("abc 1:1.0\n")

    def test_empty_file(self):
        with pytest.raises(LibsvmFormatError, match="empty"):
            parse_libsvm("\n\n")

    def test_dim_override_pads(self):
        ds = parse_libsvm("+1 1:1.0\n", dim=10)
        assert ds.dim == 10

    def test_dim_override_too_small(self):
        with pytest.raises(LibsvmFormatError):
            parse_libsvm("+1 5:1.0\n", dim=3)

    def test_comments_and_blank_lines(self):
        ds = parse_libsvm("# header\n+1 1:1.0\n\n-1 2:1.0  # trailing\n")
        assert ds.n == 2


class TestRoundTrip:
    @given(st.integers(0, 2**31))
    @settings(max_examples=20, deadline=None)
    def test_synthetic_round_trip(self, seed):
        ds = generate_synthetic(30, 6, seed=seed)
        buf = io.StringIO()
        to_libsvm(ds, buf)
        again = parse_libsvm(buf.getvalue(), name=ds.name, dim=ds.dim)
        assert again.n == ds.n and again.dim == ds.dim
        assert np.array_equal(again.labels, ds.labels)
        assert (again.features != ds.features).nnz == 0

    def test_awkward_values_round_trip(self):
        text = "+1 1:1e-300 3:0.1\n-1 2:123456789.123456789\n"
        ds = parse_libsvm(text)
        buf = io.StringIO()
        to_libsvm(ds, buf)
        again = parse_libsvm(buf.getvalue())
        assert (again.features != ds.features).nnz == 0


class TestPartition:
    def _ds(self, n):
        return generate_synthetic(n, 4, seed=0)

    def test_even_split(self):
        part = partition(self._ds(10), 2, Regime.HETEROGENEOUS)
        assert part.node_ranges == ((0, 5), (5, 10))

    def test_remainder_to_front(self):
        part = partition(self._ds(10), 3, Regime.HETEROGENEOUS)
        assert part.node_ranges == ((0, 4), (4, 7), (7, 10))

    def test_identical_regime(self):
        part = partition(self._ds(10), 4, Regime.IDENTICAL)
        assert part.node_ranges == ((0, 10),) * 4

    def test_m_zero_rejected(self):
        with pytest.raises(ValueError):
            partition(self._ds(10), 0, Regime.IDENTICAL)

    def test_m_exceeds_n_rejected(self):
        with pytest.raises(ValueError):
            partition(self._ds(3), 5, Regime.HETEROGENEOUS)

    @given(st.integers(1, 200), st.integers(1, 40))
    @settings(max_examples=60, deadline=None)
    def test_sizes_and_coverage(self, n, M):
        if M > n:
            return
        part = partition(self._ds(n), M, Regime.HETEROGENEOUS)
        sizes = part.sizes()
        assert max(sizes) - min(sizes) <= 1
        covered = [i for a, b in part.node_ranges for i in range(a, b)]
        assert covered == list(range(n))


class TestManifest:
    def test_parse_and_load(self, tmp_path):
        ds = generate_synthetic(25, 5, seed=4)
        path = tmp_path / "toy.txt"
        with open(path, "w") as f:
            to_libsvm(ds, f)
        sha = sha256_of(str(path))
        entries = parse_manifest(f"toy toy.txt {sha} 25 5\n")
        loaded = load_dataset(entries["toy"], str(tmp_path))
        assert loaded.n == 25 and loaded.dim == 5

    def test_gzip_input(self, tmp_path):
        ds = generate_synthetic(10, 3, seed=5)
        buf = io.StringIO()
        to_libsvm(ds, buf)
        path = tmp_path / "toy.txt.gz"
        with gzip.open(path, "wt") as f:
            f.write(buf.getvalue())
        sha = sha256_of(str(path))
        entries = parse_manifest(f"toy toy.txt.gz {sha} 10 3\n")
        loaded = load_dataset(entries["toy"], str(tmp_path))
        assert loaded.n == 10

    def test_checksum_mismatch(self, tmp_path):
        path = tmp_path / "toy.txt"
        path.write_text("+1 1:1.0\n")
        entries = parse_manifest("toy toy.txt deadbeef 1 1\n")
        with pytest.raises(ManifestError, match="checksum"):
            load_dataset(entries["toy"], str(tmp_path))

    def test_shape_mismatch(self, tmp_path):
        path = tmp_path / "toy.txt"
        path.write_text("+1 1:1.0\n")
        sha = sha256_of(str(path))
        entries = parse_manifest(f"toy toy.txt {sha} 2 1\n")
        with pytest.raises(ManifestError, match="shape"):
            load_dataset(entries["toy"], str(tmp_path))

    def test_missing_file(self, tmp_path):
        entries = parse_manifest("toy nothere.txt deadbeef 1 1\n")
        with pytest.raises(ManifestError, match="not found"):
            load_dataset(entries["toy"], str(tmp_path))

    def test_bad_manifest_line(self):
        with pytest.raises(ManifestError, match="line 1"):
            parse_manifest("only three fields\n")


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(50, 7, seed=11)
        b = generate_synthetic(50, 7, seed=11)
        assert np.array_equal(a.labels, b.labels)
        assert (a.features != b.features).nnz == 0

    def test_sorted_labels(self):
        ds = generate_synthetic(100, 5, seed=12, sort_by_label=True)
        assert np.all(np.diff(ds.labels) >= 0)

    def test_label_noise_flips_some(self):
        clean = generate_synthetic(200, 5, seed=13)
        noisy = generate_synthetic(200, 5, seed=13, label_noise=0.2)
        flipped = np.mean(clean.labels != noisy.labels)
        assert 0.05 < flipped < 0.4

    def test_concat(self):
        block = generate_synthetic(20, 5, seed=14)
        tiled = concat_datasets([block] * 3)
        assert tiled.n == 60
        assert np.array_equal(tiled.labels[:20], block.labels)
