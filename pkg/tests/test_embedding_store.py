import numpy as np
import pytest

from repsim.embedding_store import (
    EmbeddingSet,
    Manifest,
    ManifestRow,
    manifest_path_for,
    plan_batches,
    read_embedding_set,
    write_embedding_set,
)
from repsim.errors import CapacityError, FormatError, ValidationError


def make_manifest(n, slides=2, diseases=1, model="m"):
    rows = []
    for i in range(n):
        slide = i % slides
        rows.append(
            ManifestRow(
                row_index=i,
                patch_id=f"p{i:04d}",
                slide_id=f"s{slide:03d}",
                disease_label=f"dis{slide % diseases}",
                model_id=model,
                batch_id=0,
                x=224 * i,
                y=0,
            )
        )
    return Manifest(rows)


def make_set(n, d, seed=0, **kwargs):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, d)).astype(np.float32)
    return EmbeddingSet(data, make_manifest(n, **kwargs))


class TestManifest:
    def test_row_index_must_cover_range(self):
        rows = [
            ManifestRow(0, "p0", "s0", "d0", "m", 0, 0, 0),
            ManifestRow(2, "p1", "s0", "d0", "m", 0, 0, 0),
        ]
        with pytest.raises(ValidationError, match="0..N-1"):
            Manifest(rows)

    def test_duplicate_slide_patch_pair_rejected(self):
        rows = [
            ManifestRow(0, "p0", "s0", "d0", "m", 0, 0, 0),
            ManifestRow(1, "p0", "s0", "d0", "m", 0, 0, 0),
        ]
        with pytest.raises(ValidationError, match="duplicate"):
            Manifest(rows)

    def test_slide_disease_conflict_rejected(self):
        rows = [
            ManifestRow(0, "p0", "s0", "dA", "m", 0, 0, 0),
            ManifestRow(1, "p1", "s0", "dB", "m", 0, 0, 0),
        ]
        with pytest.raises(ValidationError, match="maps to diseases"):
            Manifest(rows)

    def test_alignment_digest_ignores_model(self):
        a = make_manifest(6, model="model_a")
        b = make_manifest(6, model="model_b")
        assert a.alignment_digest() == b.alignment_digest()

    def test_tsv_round_trip(self, tmp_path):
        m = make_manifest(7, slides=3)
        m.to_tsv(tmp_path / "m.tsv")
        assert Manifest.from_tsv(tmp_path / "m.tsv") == m

    def test_reordered_reassigns_row_index(self):
        m = make_manifest(4)
        r = m.reordered([3, 2, 1, 0])
        assert [row.row_index for row in r.rows] == [0, 1, 2, 3]
        assert [row.patch_id for row in r.rows] == ["p0003", "p0002", "p0001", "p0000"]


class TestEmbeddingFile:
    def test_small_file_is_13_plus_24_bytes(self, tmp_path):
        es = EmbeddingSet(np.array([[0, 0, 0], [1, 1, 1]], dtype=np.float32), make_manifest(2))
        path = tmp_path / "a.emb1"
        write_embedding_set(es, path)
        assert path.stat().st_size == 13 + 24
        assert read_embedding_set(path) == es

    def test_n_below_two_rejected(self):
        with pytest.raises(ValidationError, match="N >= 2 required"):
            EmbeddingSet(np.zeros((0, 3), dtype=np.float32), make_manifest(2))

    def test_round_trip_random(self, tmp_path):
        es = make_set(100, 16, seed=7, slides=10)
        path = tmp_path / "b.emb1"
        write_embedding_set(es, path)
        back = read_embedding_set(path)
        assert np.array_equal(back.data, es.data)
        assert back.manifest == es.manifest

    def test_non_finite_rejected(self):
        data = np.ones((2, 3), dtype=np.float32)
        data[1, 2] = np.nan
        with pytest.raises(ValidationError, match="row 1, col 2"):
            EmbeddingSet(data, make_manifest(2))

    def test_manifest_count_mismatch(self, tmp_path):
        es = make_set(10, 4, slides=5)
        path = tmp_path / "c.emb1"
        write_embedding_set(es, path)
        # drop one manifest row (fix indices so the TSV itself stays parseable)
        nine = [r for r in es.manifest.rows[:9]]
        Manifest(nine).to_tsv(manifest_path_for(path))
        with pytest.raises(FormatError, match="manifest rows 9 != N 10"):
            read_embedding_set(path)

    def test_truncated_payload(self, tmp_path):
        es = make_set(10, 4, slides=5)
        path = tmp_path / "d.emb1"
        write_embedding_set(es, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(FormatError, match=f"expected {len(raw)} bytes, got {len(raw) - 1}"):
            read_embedding_set(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "e.emb1"
        path.write_bytes(b"XXXX" + bytes(9))
        with pytest.raises(FormatError, match="bad magic"):
            read_embedding_set(path)

    def test_unknown_dtype_code(self, tmp_path):
        es = make_set(2, 2)
        path = tmp_path / "f.emb1"
        write_embedding_set(es, path)
        raw = bytearray(path.read_bytes())
        raw[12] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="unknown dtype code 9"):
            read_embedding_set(path)


def manifest_with_slides(slides_per_disease, diseases):
    rows = []
    idx = 0
    for c in range(diseases):
        for s in range(slides_per_disease):
            rows.append(
                ManifestRow(
                    row_index=idx,
                    patch_id="p000",
                    slide_id=f"c{c}_s{s:04d}",
                    disease_label=f"dis{c}",
                    model_id="m",
                    batch_id=0,
                    x=0,
                    y=0,
                )
            )
            idx += 1
    return Manifest(rows)


class TestPlanBatches:
    def test_paper_shape_defaults(self):
        m = manifest_with_slides(250, 4)
        plan = plan_batches(m, seed=11)
        assert plan.n_batches == 5
        seen = set()
        for b in range(5):
            for dis in (f"dis{c}" for c in range(4)):
                slides = plan.assignments[b][dis]
                assert len(slides) == 50
                assert not (set(slides) & seen)
                seen.update(slides)
        assert len(seen) == 1000

    def test_two_slides_two_batches(self):
        m = manifest_with_slides(2, 1)
        plan = plan_batches(m, n_batches=2, wsis_per_disease_per_batch=1, seed=3)
        a = set(plan.assignments[0]["dis0"])
        b = set(plan.assignments[1]["dis0"])
        assert not (a & b)
        assert a | b == {"c0_s0000", "c0_s0001"}

    def test_deterministic(self):
        m = manifest_with_slides(30, 2)
        p1 = plan_batches(m, n_batches=3, wsis_per_disease_per_batch=5, seed=42)
        p2 = plan_batches(m, n_batches=3, wsis_per_disease_per_batch=5, seed=42)
        assert p1.assignments == p2.assignments

    def test_disjoint_over_random_manifests(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            diseases = int(rng.integers(1, 4))
            slides = int(rng.integers(4, 30))
            m = manifest_with_slides(slides, diseases)
            n_batches = int(rng.integers(1, 4))
            per = int(rng.integers(1, max(2, slides // n_batches)))
            if n_batches * per > slides:
                continue
            plan = plan_batches(m, n_batches=n_batches, wsis_per_disease_per_batch=per, seed=int(rng.integers(1 << 31)))
            seen = set()
            for b in range(n_batches):
                batch_slides = {s for v in plan.assignments[b].values() for s in v}
                assert not (batch_slides & seen)
                seen.update(batch_slides)

    def test_capacity_error_names_disease(self):
        m = manifest_with_slides(3, 1)
        with pytest.raises(CapacityError, match="dis0: 3 < 4"):
            plan_batches(m, n_batches=2, wsis_per_disease_per_batch=2, seed=0)
