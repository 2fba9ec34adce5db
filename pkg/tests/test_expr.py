import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from corrbound import expr as ex
from corrbound.backend import get_backend

R = 2
VARS = [f"{k}{i}" for k in "qp" for i in range(1, R + 1)]


def _trees(smooth: bool):
    leaves = st.one_of(
        st.sampled_from(VARS),
        st.integers(0, 9).map(str),
        st.floats(0.1, 5.0, allow_nan=False).map(lambda x: f"{x:.3g}"),
    )

    def extend(children):
        ops = ["+", "-", "*"] + ([] if smooth else ["/", "^"])
        binary = st.tuples(children, st.sampled_from(ops), children).map(lambda t: f"({t[0]} {t[1]} {t[2]})")
        funcs = ["sin", "cos"] + ([] if smooth else ["exp", "sqrt"])
        call = st.tuples(st.sampled_from(funcs), children).map(lambda t: f"{t[0]}({t[1]})")
        power = st.tuples(children, st.integers(0, 3)).map(lambda t: f"({t[0]})^{t[1]}")
        neg = children.map(lambda c: f"-{c}")
        return st.one_of(binary, call, power, neg)

    return st.recursive(leaves, extend, max_leaves=12)


any_text = _trees(smooth=False)
smooth_text = _trees(smooth=True)


class TestParse:
    def test_sum_of_squares_tree(self):
        e = ex.parse("q1^2 + p1^2", 1)
        assert e == ex.Binary("+", ex.Binary("^", ex.Var("q", 1), ex.Const(2.0)),
                              ex.Binary("^", ex.Var("p", 1), ex.Const(2.0)))

    def test_pendulum_hamiltonian(self):
        e = ex.parse("p1^2/2 - cos(q1)", 1)
        assert isinstance(e, ex.Binary) and e.op == "-"
        assert e.right == ex.Call("cos", ex.Var("q", 1))

    def test_index_out_of_range(self):
        with pytest.raises(ex.ExprSyntaxError, match="out of range") as info:
            ex.parse("q3", 2)
        assert info.value.position == 0

    def test_syntax_error_position(self):
        with pytest.raises(ex.ExprSyntaxError) as info:
            ex.parse("q1 + * 2", 1)
        assert info.value.position == 5
        assert "expected" in str(info.value)

    @pytest.mark.parametrize("text", ["foo", "q1 +", "(q1", "q1)", "sin q1", "q0", "q1 $ 2", ""])
    def test_rejects(self, text):
        with pytest.raises(ex.ExprSyntaxError):
            ex.parse(text, 1)

    def test_precedence_and_associativity(self):
        ev = lambda t: ex.evaluate(ex.parse(t, 1), (0.0,), (0.0,))
        assert ev("-2^2") == -4
        assert ev("2^3^2") == 512
        assert ev("8/4/2") == 1
        assert ev("1 - 2 - 3") == -4
        assert ev("2*3+4*5") == 26

    def test_macros_expand(self):
        H = ex.parse("p1^2/2 + q1^2/2", 1)
        e = ex.parse("H1^2", 1, ex.conserved_macros([H]))
        assert e == ex.Binary("^", H, ex.Const(2.0))

    def test_r_must_be_positive(self):
        with pytest.raises(ValueError):
            ex.parse("1", 0)


class TestEvaluate:
    def test_examples(self):
        assert ex.evaluate(ex.parse("q1^2+p1^2", 1), (3.0,), (4.0,)) == 25
        assert ex.evaluate(ex.parse("cos(q1)", 1), (0.0,), (0.0,)) == 1
        assert ex.evaluate(ex.parse("p1^2/2 - cos(q1)", 1), (math.pi,), (0.0,)) == 1

    def test_division_by_zero(self):
        with pytest.raises(ex.EvaluationError, match="division by zero"):
            ex.evaluate(ex.parse("1/q1", 1), (0.0,), (0.0,))

    def test_sqrt_domain(self):
        with pytest.raises(ex.EvaluationError, match="sqrt"):
            ex.evaluate(ex.parse("sqrt(q1)", 1), (-1.0,), (0.0,))

    def test_pi_constant(self):
        assert ex.evaluate(ex.parse("pi", 1), (0.0,), (0.0,)) == math.pi

    @given(any_text, st.lists(st.floats(-2, 2), min_size=2 * R, max_size=2 * R))
    def test_batch_matches_scalar(self, text, xs):
        e = ex.parse(text, R)
        try:
            ref = ex.evaluate(e, xs[:R], xs[R:])
        except (ex.EvaluationError, OverflowError):
            return
        assume(math.isfinite(ref))
        got = ex.evaluate_many(e, np.array([xs]))[0]
        assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)


class TestPretty:
    @given(any_text)
    def test_round_trip_fixed_point(self, text):
        once = ex.pretty(ex.parse(text, R))
        twice = ex.pretty(ex.parse(once, R))
        assert once == twice

    @given(any_text)
    def test_round_trip_same_tree(self, text):
        e = ex.parse(text, R)
        assert ex.parse(ex.pretty(e), R) == e


class TestGradient:
    def test_examples(self):
        assert ex.pretty(ex.derivative(ex.parse("q1^2", 1), "q", 1)) == "2*q1"
        assert ex.pretty(ex.derivative(ex.parse("p1^2/2 - cos(q1)", 1), "p", 1)) == "p1"

    def test_gradient_layout(self):
        dq, dp = ex.gradient(ex.parse("q1*p2", 2), 2)
        assert dq == (ex.Var("p", 2), ex.Const(0.0))
        assert dp == (ex.Const(0.0), ex.Var("q", 1))

    @staticmethod
    def _fd_check(e, x, h=1e-5):
        for kind in "qp":
            for i in range(1, R + 1):
                j = (i - 1) + (0 if kind == "q" else R)
                xp, xm = x.copy(), x.copy()
                xp[j] += h
                xm[j] -= h
                fd = (ex.evaluate(e, xp[:R], xp[R:]) - ex.evaluate(e, xm[:R], xm[R:])) / (2 * h)
                sym = ex.evaluate(ex.derivative(e, kind, i), x[:R], x[R:])
                scale = max(1.0, abs(sym), abs(ex.evaluate(e, x[:R], x[R:])))
                assert abs(fd - sym) <= 1e-6 * scale, (ex.pretty(e), kind, i, fd, sym)

    @given(smooth_text, st.lists(st.floats(-1.5, 1.5), min_size=2 * R, max_size=2 * R))
    def test_matches_central_differences(self, text, xs):
        self._fd_check(ex.parse(text, R), np.array(xs))

    @pytest.mark.parametrize("text", [
        "p1^2/2 - cos(q1)", "p1^2/2 + q1^2/2 + p2^2/2 + q2^2", "exp(-q1^2)*sin(p2)", "sqrt(2 + q1^2)/(3 + p1^2)",
        "q1^3*p2 - q2^2/(1 + p1^2)", "log(2 + cos(q2))",
    ])
    def test_corpus_at_random_points(self, text):
        e = ex.parse(text, R)
        rng = np.random.default_rng(11)
        for _ in range(20):
            self._fd_check(e, rng.uniform(-1.5, 1.5, 2 * R))


class TestSubstitute:
    def test_reindex(self):
        e = ex.parse("p1^2/2 + q1^2", 1)
        s = ex.substitute(e, {("q", 1): ex.Var("q", 2), ("p", 1): ex.Var("p", 2)})
        assert ex.pretty(s) == "p2^2/2 + q2^2"


def test_expressions_are_hashable_and_immutable():
    e = ex.parse("q1 + 1", 1)
    assert hash(e) == hash(ex.parse("q1 + 1", 1))
    with pytest.raises(Exception):
        e.op = "-"


def test_batch_evaluation_errors_name_row():
    b = get_backend()
    X = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(Exception, match="division by zero"):
        ex.evaluate_many(ex.parse("1/q1", 1), X, b)
