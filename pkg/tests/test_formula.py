import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmmvar.formula import (
    CorrelationIgnoredWarning,
    FormulaAst,
    FormulaError,
    RandomTerm,
    parse_formula,
    render_formula,
)


def test_sleepstudy_formula_expands_double_bar():
    ast = parse_formula("Reaction ~ Days + (Days || Subject)")
    assert ast.response == "Reaction"
    assert ast.fixed_terms == ("Days",)
    assert ast.random_specs == (RandomTerm("1", "Subject"), RandomTerm("Days", "Subject"))


def test_plain_linear_model():
    ast = parse_formula("y ~ x")
    assert ast.fixed_terms == ("x",) and ast.random_specs == ()


def test_single_bar_warns_and_means_uncorrelated():
    with pytest.warns(CorrelationIgnoredWarning):
        ast = parse_formula("y ~ (1 | g)")
    assert ast.fixed_terms == ()
    assert ast.random_specs == (RandomTerm("1", "g"),)


def test_zero_plus_suppresses_random_intercept():
    ast = parse_formula("y ~ x + (0 + x || g)")
    assert ast.random_specs == (RandomTerm("x", "g"),)


def test_multiple_slopes_and_groups():
    ast = parse_formula("y ~ a + b + (a + b || g) + (1 || h)")
    assert ast.random_specs == (
        RandomTerm("1", "g"), RandomTerm("a", "g"), RandomTerm("b", "g"), RandomTerm("1", "h"),
    )


def test_explicit_intercept_in_fixed_part_is_accepted():
    assert parse_formula("y ~ 1 + x").fixed_terms == ("x",)
    assert parse_formula("y ~ 1").fixed_terms == ()


def test_no_warning_for_double_bar():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        parse_formula("y ~ x + (x || g)")


@pytest.mark.parametrize(
    "text, position",
    [
        ("y ~ x:z", 5),
        ("y ~ x*z", 5),
        ("y ~ (1 || a/b)", 11),
        ("y ~ x - 1", 6),
        ("y ~ 0 + x", 4),
        ("y x", 2),
        ("y ~ (x g)", 7),
        ("y ~ x +", 7),
        ("y ~ x $ z", 6),
        ("y ~ (0 || g)", 5),
        ("", 0),
    ],
)
def test_syntax_errors_carry_byte_positions(text, position):
    with pytest.raises(FormulaError) as exc:
        parse_formula(text)
    assert exc.value.position == position


def test_positions_are_byte_offsets():
    with pytest.raises(FormulaError) as exc:
        parse_formula("y ~ é")
    assert exc.value.position == 4
    # a no-break space is whitespace but two bytes in UTF-8
    with pytest.raises(FormulaError) as exc:
        parse_formula("y ~\u00a0x:z")
    assert exc.value.position == 6  # character index 5


def test_duplicate_terms_rejected():
    with pytest.raises(FormulaError, match="duplicate fixed"):
        parse_formula("y ~ x + x")
    with pytest.raises(FormulaError, match="duplicate random"):
        parse_formula("y ~ (x || g) + (1 || g)")
    with pytest.raises(FormulaError, match="duplicate slope"):
        parse_formula("y ~ (x + x || g)")


def test_response_as_predictor_rejected():
    with pytest.raises(FormulaError, match="response"):
        parse_formula("y ~ x + y")
    with pytest.raises(FormulaError, match="response"):
        parse_formula("y ~ (y || g)")
    with pytest.raises(FormulaError, match="response"):
        parse_formula("y ~ (1 || y)")


def test_columns_property():
    assert parse_formula("Reaction ~ Days + (Days || Subject)").columns == {"Reaction", "Days", "Subject"}


def test_render_examples():
    assert render_formula(parse_formula("y ~ x + (x || g)")) == "y ~ x + (1 || g) + (0 + x || g)"
    assert render_formula(FormulaAst("y")) == "y ~ 1"


_names = st.from_regex(r"[A-Za-z_][A-Za-z0-9_.]{0,6}", fullmatch=True)


@st.composite
def _asts(draw):
    names = draw(st.lists(_names, min_size=2, max_size=8, unique=True))
    response, rest = names[0], names[1:]
    fixed = draw(st.lists(st.sampled_from(rest), unique=True, max_size=len(rest)))
    groups = draw(st.lists(st.sampled_from(rest), unique=True, max_size=2))
    specs = []
    for g in groups:
        terms = draw(st.lists(st.sampled_from(["1", *rest]), unique=True, min_size=1, max_size=3))
        specs.extend(RandomTerm(t, g) for t in terms)
    return FormulaAst(response, tuple(fixed), tuple(specs))


@settings(max_examples=200, deadline=None)
@given(_asts())
def test_render_parse_round_trip(ast):
    assert parse_formula(render_formula(ast)) == ast


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet="yxg01~+()|:*/- ", max_size=20))
def test_parser_is_total(text):
    try:
        parse_formula(text)
    except FormulaError as exc:
        assert 0 <= exc.position <= len(text.encode())
    except Warning:
        pass
