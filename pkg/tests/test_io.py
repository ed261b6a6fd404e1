import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optrerand.design_space import enumerate_balanced
from optrerand.errors import InvalidDimensionError, SchemaError, ValidationError
from optrerand.io import (
    SCHEMA,
    DesignArtifact,
    ingest_covariates,
    load_design,
    read_assignment,
    read_vector,
    save_design,
    standardize,
)
from optrerand.optimizer import SearchMode, optimize
from optrerand.tail import TailSpec

from conftest import standardized


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestStandardize:
    def test_four_by_one(self, tmp_path):
        t = ingest_covariates(_write(tmp_path, "x.csv", "1\n2\n3\n4\n"))
        z = t.standardized[:, 0]
        # sd of 1..4 with n-1 denominator is sqrt(5/3)
        np.testing.assert_allclose(z, (np.arange(1, 5) - 2.5) / np.sqrt(5 / 3), rtol=1e-14)
        assert t.names == ("x1",)

    @settings(max_examples=30)
    @given(st.integers(0, 10**6), st.integers(1, 5))
    def test_invariants(self, seed, p):
        r = np.random.default_rng(seed)
        X = r.standard_normal((10, p)) * r.uniform(0.1, 1e4, p) + r.uniform(-1e5, 1e5, p)
        Z, _, _ = standardize(X)
        assert np.abs(Z.mean(axis=0)).max() <= 1e-10
        assert np.abs(Z.std(axis=0, ddof=1) - 1).max() <= 1e-10

    def test_header_detected(self, tmp_path):
        t = ingest_covariates(_write(tmp_path, "x.csv", "age,score\n30,1\n40,5\n35,2\n50,0\n"))
        assert t.names == ("age", "score") and t.n == 4

    def test_missing_named(self, tmp_path):
        p = _write(tmp_path, "x.csv", "a,b\n1,2\n3,NA\n4,5\n6,7\n")
        with pytest.raises(ValidationError, match="row 3, column 2"):
            ingest_covariates(p)

    def test_constant_column(self, tmp_path):
        with pytest.raises(ValidationError, match="flat"):
            ingest_covariates(_write(tmp_path, "x.csv", "a,flat\n1,7\n2,7\n3,7\n4,7\n"))

    def test_odd_n(self, tmp_path):
        with pytest.raises(InvalidDimensionError):
            ingest_covariates(_write(tmp_path, "x.csv", "1\n2\n3\n"))

    def test_ragged(self, tmp_path):
        with pytest.raises(ValidationError, match="row 2"):
            ingest_covariates(_write(tmp_path, "x.csv", "1,2\n3\n4,5\n6,7\n"))

    def test_tab_delimited(self, tmp_path):
        t = ingest_covariates(_write(tmp_path, "x.tsv", "1\t9\n2\t3\n5\t1\n4\t4\n"))
        assert t.p == 2


class TestVectors:
    def test_read_vector_header(self, tmp_path):
        np.testing.assert_array_equal(read_vector(_write(tmp_path, "y", "y\n1.5\n-2\n")), [1.5, -2.0])

    def test_read_vector_bad(self, tmp_path):
        with pytest.raises(ValidationError, match="line 3"):
            read_vector(_write(tmp_path, "y", "1\n2\nx\n"))

    def test_read_assignment(self, tmp_path):
        np.testing.assert_array_equal(read_assignment(_write(tmp_path, "w", "+-+-\n"), 4), [1, -1, 1, -1])
        with pytest.raises(ValidationError):
            read_assignment(_write(tmp_path, "w2", "+-\n-+\n"))


@pytest.fixture(scope="module")
def design8():
    X = standardized(np.random.default_rng(11).standard_normal((8, 2)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize(X, enumerate_balanced(8), tail=TailSpec(strategy="exact", n_z=300, seed=4),
                       mode=SearchMode("exhaustive"))
    # keep the whole pool so the round trip covers all 70 assignments
    from dataclasses import replace
    full = replace(res, W_star=enumerate_balanced(8).assignments, s_star=70)
    return DesignArtifact(full, column_names=("a", "b"), seed=4, created="2000-01-01T00:00:00Z")


class TestArtifact:
    def test_roundtrip_70(self, design8):
        text = save_design(design8)
        back = load_design(text)
        r0, r1 = design8.result, back.result
        assert r1.W_star.shape == (70, 8)
        np.testing.assert_array_equal(r1.W_star, r0.W_star)
        assert r1.X.tobytes() == r0.X.tobytes()
        assert r1.trace_Q.tobytes() == r0.trace_Q.tobytes()
        assert r1.trace_Q_smoothed.tobytes() == r0.trace_Q_smoothed.tobytes()
        assert (r1.a_star, r1.Q_star, r1.config) == (r0.a_star, r0.Q_star, r0.config)
        assert save_design(back) == text

    def test_file_roundtrip(self, design8, tmp_path):
        path = tmp_path / "d.json"
        save_design(design8, path)
        assert load_design(path).result.s_star == 70

    def test_truncated(self, design8):
        text = save_design(design8)
        with pytest.raises(SchemaError):
            load_design(text[: len(text) // 2])

    def test_schema_version(self, design8):
        d = json.loads(save_design(design8))
        d["schema"] = "optrerand.design/0"
        with pytest.raises(SchemaError, match="schema"):
            load_design(json.dumps(d))
        assert SCHEMA.endswith("/1")

    def test_n_mismatch(self, design8):
        d = json.loads(save_design(design8))
        d["n"] = 10
        with pytest.raises(ValidationError):
            load_design(json.dumps(d))

    def test_missing_field(self, design8):
        d = json.loads(save_design(design8))
        del d["trace"]
        with pytest.raises(SchemaError, match="trace"):
            load_design(json.dumps(d))

    def test_s_star_count(self, design8):
        d = json.loads(save_design(design8))
        d["W_star"] = d["W_star"][:-2]
        with pytest.raises(SchemaError):
            load_design(json.dumps(d))

    def test_source_date_epoch(self, design8, monkeypatch):
        from dataclasses import replace
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
        d = json.loads(save_design(replace(design8, created=None)))
        assert d["created"] == "1970-01-01T00:00:00Z"
