import statistics

import numpy as np
import pytest

from lmmvar.design import (
    CATEGORICAL,
    NUMERIC,
    DataError,
    Dataset,
    ModelFrame,
    build_model_frame,
    load_sleepstudy,
    read_csv,
)
from lmmvar.formula import parse_formula
from lmmvar.inference import solve_blue_blup
from lmmvar.reml import fit_reml
from lmmvar.decomposition import compute_moments, decompose


def _write(tmp_path, text, name="d.csv", raw=None):
    path = tmp_path / name
    if raw is not None:
        path.write_bytes(raw)
    else:
        path.write_text(text, encoding="utf-8")
    return path


def test_sleepstudy_dataset():
    d = load_sleepstudy()
    assert d.n == 180
    assert d.kinds["Subject"] == CATEGORICAL and d.kinds["Reaction"] == NUMERIC
    assert len(set(d.columns["Subject"])) == 18


def test_sleepstudy_frame_dimensions(sleep_frame):
    assert (sleep_frame.n, sleep_frame.k, sleep_frame.r) == (180, 1, 2)
    assert sleep_frame.p == (18, 18)
    assert sleep_frame.block_labels == ("(Intercept) | Subject", "Days | Subject")


def test_header_only_file_is_empty_body(tmp_path):
    with pytest.raises(DataError, match="empty body"):
        read_csv(_write(tmp_path, "a\n"))


def test_string_column_becomes_categorical(tmp_path):
    d = read_csv(_write(tmp_path, "g,y\na,1\nb,2\na,3\n"))
    assert d.kinds["g"] == CATEGORICAL and len(set(d.columns["g"])) == 2
    assert d.kinds["y"] == NUMERIC


def test_missing_value_reports_row_and_column(tmp_path):
    with pytest.raises(DataError) as exc:
        read_csv(_write(tmp_path, "y,x\n1,2\n3,NA\n4,5\n"))
    assert exc.value.row == 3 and exc.value.column == "x"


def test_ragged_row(tmp_path):
    with pytest.raises(DataError, match="ragged") as exc:
        read_csv(_write(tmp_path, "y,x\n1,2\n3\n4,5\n"))
    assert exc.value.row == 3


def test_empty_and_non_utf8(tmp_path):
    with pytest.raises(DataError, match="empty"):
        read_csv(_write(tmp_path, ""))
    with pytest.raises(DataError, match="UTF-8"):
        read_csv(_write(tmp_path, None, raw=b"y,x\n1,\xff\n2,3\n4,5\n"))


def test_quoted_fields_and_schema_hints(tmp_path):
    d = read_csv(_write(tmp_path, 'y,"g"\n1,"7"\n2,"8"\n3,"7"\n'), {"g": CATEGORICAL})
    assert d.kinds["g"] == CATEGORICAL
    assert list(d.columns["g"]) == ["7", "8", "7"]


def test_non_numeric_under_numeric_hint(tmp_path):
    with pytest.raises(DataError, match="non-numeric") as exc:
        read_csv(_write(tmp_path, "y,x\n1,2\n3,b\n4,5\n"), {"x": NUMERIC})
    assert exc.value.row == 3


def test_dataset_requires_three_rows():
    with pytest.raises(DataError):
        Dataset.from_mapping({"y": [1.0, 2.0]})


def test_one_hot_block_first_appearance_order():
    d = Dataset.from_mapping({"y": [1.0, 2.0, 3.0, 5.0], "g": ["a", "a", "b", "b"]})
    with pytest.warns(UserWarning):
        frame = build_model_frame(d, parse_formula("y ~ (1|g)"))
    np.testing.assert_array_equal(frame.z_blocks[0], [[1, 0], [1, 0], [0, 1], [0, 1]])
    d2 = Dataset.from_mapping({"y": [1.0, 2.0, 3.0, 5.0], "g": ["b", "a", "b", "a"]})
    frame2 = build_model_frame(d2, parse_formula("y ~ (1||g)"))
    assert frame2.level_labels == (("b", "a"),)


def test_linear_model_frame():
    d = Dataset.from_mapping({"y": [1.0, 2.0, 4.0, 3.0], "x": [0.0, 1.0, 2.0, 4.0]})
    frame = build_model_frame(d, parse_formula("y ~ x"))
    assert (frame.k, frame.r) == (1, 0)


def test_slope_block_is_indicator_times_x(sleep_frame):
    days = np.asarray(load_sleepstudy().columns["Days"])
    z0, z1 = sleep_frame.z_blocks
    np.testing.assert_array_equal(z0.sum(axis=1), 1.0)
    np.testing.assert_array_equal(z1, z0 * days[:, None])


def test_design_errors():
    d = Dataset.from_mapping({"y": [1.0, 2.0, 4.0, 3.0], "x": [1.0, 2.0, 3.0, 4.0],
                              "g": ["a", "b", "a", "b"]})
    with pytest.raises(DataError, match="unknown column"):
        build_model_frame(d, parse_formula("y ~ z"))
    with pytest.raises(DataError, match="categorical"):
        build_model_frame(d, parse_formula("y ~ g"))
    with pytest.raises(DataError, match="categorical"):
        build_model_frame(d, parse_formula("g ~ x"))
    with pytest.raises(DataError, match="categorical"):
        build_model_frame(d, parse_formula("y ~ (0 + g || x)"))
    d2 = Dataset.from_mapping({"y": [1.0, 2.0, 4.0, 3.0], "x": [1.0, 2.0, 3.0, 4.0],
                               "x2": [2.0, 4.0, 6.0, 8.0]})
    with pytest.raises(DataError, match="rank deficient"):
        build_model_frame(d2, parse_formula("y ~ x + x2"))
    d3 = Dataset.from_mapping({"y": [1.0, 2.0, 4.0, 3.0], "c": [5.0, 5.0, 5.0, 5.0]})
    with pytest.raises(DataError, match="rank deficient"):
        build_model_frame(d3, parse_formula("y ~ c"))


def test_frame_requires_n_above_k_plus_one():
    with pytest.raises(DataError, match="n > k"):
        ModelFrame(np.arange(3.0), np.random.default_rng(0).normal(size=(3, 2)), ())


def test_frame_is_read_only(sleep_frame):
    with pytest.raises(ValueError):
        sleep_frame.y[0] = 1.0


def test_numeric_group_column_is_treated_as_labels():
    d = Dataset.from_mapping({"y": [1.0, 2.0, 4.0, 3.0, 6.0], "g": [1.0, 2.0, 1.0, 2.0, 3.0]})
    frame = build_model_frame(d, parse_formula("y ~ (1 || g)"))
    assert frame.p == (3,) and frame.level_labels == (("1", "2", "3"),)


def test_row_permutation_leaves_downstream_scalars_unchanged(sleep_frame):
    data = load_sleepstudy()
    perm = np.random.default_rng(3).permutation(data.n)
    frame_p = build_model_frame(data.take(perm), parse_formula("Reaction ~ Days + (Days || Subject)"))

    def scalars(frame):
        rep = fit_reml(frame)
        fit = solve_blue_blup(frame, rep.estimates, rep)
        dec = decompose(fit, compute_moments(frame))
        return np.array([rep.estimates.sigma_eps2, *rep.estimates.sigma_u2, fit.mu_hat,
                         *fit.beta_hat, *dec.summands, dec.r2])

    a, b = scalars(sleep_frame), scalars(frame_p)
    np.testing.assert_allclose(b, a, rtol=1e-10, atol=1e-10 * np.abs(a).max())


def test_sleepstudy_variance_matches_one_pass_oracle(sleep_frame):
    assert compute_moments(sleep_frame).sigma_hat_y2 == pytest.approx(
        statistics.variance(sleep_frame.y.tolist()), rel=1e-12)
