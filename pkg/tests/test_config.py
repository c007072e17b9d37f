from hypothesis import given, settings
import hypothesis.strategies as st
import pytest

from stlite.config import BudgetConfig, Command, PolicyKind, RunConfig


class TestBudgetConfig:
    @pytest.mark.parametrize(
        "beta, seq_len, budget",
        [
            (0.2, 1000, 200),
            (0.29, 100, 29),
            (0.2, 100, 20),
            (0.001, 10, 1),
            (1.0, 37, 37),
            (0.5, 1, 1),
        ],
    )
    def test_budget(self, beta, seq_len, budget):
        assert BudgetConfig(beta=beta).budget(seq_len) == budget

    @settings(max_examples=200)
    @given(
        beta=st.floats(min_value=1e-6, max_value=1.0),
        seq_len=st.integers(min_value=1, max_value=100_000),
    )
    def test_budget_in_range(self, beta, seq_len):
        assert 1 <= BudgetConfig(beta=beta).budget(seq_len) <= seq_len

    @pytest.mark.parametrize("beta", [0.0, -0.1, 1.01])
    def test_beta_out_of_range(self, beta):
        with pytest.raises(ValueError, match="beta must be in"):
            BudgetConfig(beta=beta)

    def test_invalid_knobs(self):
        with pytest.raises(ValueError, match="delta"):
            BudgetConfig(beta=0.5, delta=0)
        with pytest.raises(ValueError, match="kernel_size"):
            BudgetConfig(beta=0.5, kernel_size=4)
        with pytest.raises(ValueError, match="pooling"):
            BudgetConfig(beta=0.5, pooling="medianpool")
        with pytest.raises(ValueError, match="vector_source"):
            BudgetConfig(beta=0.5, vector_source="values")

    def test_empty_cache(self):
        with pytest.raises(ValueError, match="empty"):
            BudgetConfig(beta=0.5).budget(0)


class TestRunConfig:
    def test_compress_needs_paths(self):
        with pytest.raises(ValueError, match="compress: output path is required"):
            RunConfig(command="compress", input_path="in", beta=0.5)

    def test_report_needs_input(self):
        with pytest.raises(ValueError, match="report: input path is required"):
            RunConfig(command=Command.REPORT)

    def test_simulate_validates_every_beta(self):
        with pytest.raises(ValueError, match="beta must be in"):
            RunConfig(command=Command.SIMULATE, betas=(0.1, 1.5))

    def test_budget_config_mirrors_flags(self):
        config = RunConfig(
            command=Command.COMPRESS,
            input_path="in",
            output_path="out",
            policy="snapkv",
            beta=0.3,
            delta=4,
            enable_css=False,
            pooling="maxpool",
        )
        assert config.policy == PolicyKind.SNAPKV
        budget = config.budget_config()
        assert budget == BudgetConfig(
            beta=0.3, delta=4, enable_css=False, pooling="maxpool"
        )
        assert config.budget_config(0.7).beta == 0.7

    def test_coverage_and_threads(self):
        with pytest.raises(ValueError, match="coverage"):
            RunConfig(command=Command.SIMULATE, coverage=0.0)
        with pytest.raises(ValueError, match="threads"):
            RunConfig(command=Command.SIMULATE, threads=-1)
