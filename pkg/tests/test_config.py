import dataclasses

import pytest

from dualspike.config import (ConfigError, ExperimentConfig, apply_overrides, parse_axis,
                              parse_config, serialize_config)


class TestParsing:
    def test_empty_file_gives_defaults(self):
        cfg = parse_config("")
        assert cfg == ExperimentConfig()

    def test_values_applied(self):
        cfg = parse_config("[train]\nepochs = 7\nlr = 0.01\n")
        assert cfg.train.epochs == 7
        assert cfg.train.lr == 0.01

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="wibble"):
            parse_config("[wibble]\nx = 1\n")

    def test_unknown_key_rejected_with_path(self):
        with pytest.raises(ConfigError, match="train.learning_rate"):
            parse_config("[train]\nlearning_rate = 0.1\n")

    def test_bad_type_reports_path(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            parse_config("[train]\nepochs = banana\n")

    def test_tau_out_of_range_rejected(self):
        with pytest.raises(ConfigError, match=r"tau_nominal.*\(0, 1\]"):
            parse_config("[attack]\ntau_nominal = 1.5\n")

    def test_invalid_target_label(self):
        with pytest.raises(ConfigError, match="target_label"):
            parse_config("[dataset]\nclasses = 3\n[attack]\ntarget_label = 3\n")


class TestRoundTrip:
    def test_default_round_trip(self):
        cfg = ExperimentConfig()
        assert parse_config(serialize_config(cfg)) == cfg

    def test_modified_round_trip(self):
        cfg = parse_config("[attack]\nq = 2.5\nbeta = 0.07\n[eval]\nvthr_axis = 1.0,1.25\n")
        again = parse_config(serialize_config(cfg))
        assert again == cfg
        assert again.attack.q == 2.5

    def test_float_precision_survives(self):
        cfg = ExperimentConfig()
        cfg.train.lr = 1 / 3
        assert parse_config(serialize_config(cfg)).train.lr == cfg.train.lr


class TestAxes:
    def test_linspace_form(self):
        assert parse_axis("1.0:1.5:11")[0] == 1.0
        assert parse_axis("1.0:1.5:11")[-1] == 1.5
        assert len(parse_axis("1.0:1.5:11")) == 11

    def test_comma_form(self):
        assert parse_axis("0.1,0.2,0.5") == [0.1, 0.2, 0.5]

    def test_malformed_rejected(self):
        with pytest.raises(ValueError):
            parse_axis("1.0:2.0")
        with pytest.raises(ValueError):
            parse_axis("")

    def test_axis_errors_carry_field_path(self):
        with pytest.raises(ConfigError, match="eval.vthr_axis"):
            parse_config("[eval]\nvthr_axis = 1.0:2.0\n")


class TestOverrides:
    def test_override_applies(self):
        cfg = apply_overrides(ExperimentConfig(), ["train.epochs=3", "attack.q=4.0"])
        assert cfg.train.epochs == 3
        assert cfg.attack.q == 4.0

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError, match="attack.qq"):
            apply_overrides(ExperimentConfig(), ["attack.qq=4.0"])

    def test_malformed_override_rejected(self):
        with pytest.raises(ConfigError, match="section.key"):
            apply_overrides(ExperimentConfig(), ["epochs3"])

    def test_override_still_validated(self):
        with pytest.raises(ConfigError, match="tau_nominal"):
            apply_overrides(ExperimentConfig(), ["attack.tau_nominal=2.0"])


def test_configs_are_plain_dataclasses():
    # round-trip equality relies on value semantics
    assert dataclasses.is_dataclass(ExperimentConfig())
