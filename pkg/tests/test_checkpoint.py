#!/usr/bin/env python3
"""
Test the checkpoint file format
"""
import os
import sys

import numpy as np
import pytest
from pydantic import ValidationError

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from checkpoint import (  # noqa: E402
    MAGIC,
    Checkpoint,
    CheckpointFormatError,
    ModelKind,
    build_model,
    dumps,
    load_checkpoint,
    loads,
    save_checkpoint,
)
from deeponet import DeepONetModel, DeepONetSpec  # noqa: E402
from nets import ConstraintConfig, HypernetSpec, MlpSpec, NprModel  # noqa: E402
from problems import Equation, IbvpSpec, ICSample  # noqa: E402

BURGERS = IbvpSpec(equation=Equation.BURGERS)


def npr_checkpoint(seed: int = 0) -> Checkpoint:
    spec = HypernetSpec.build(d_enc=8, hyper_layers=2, hyper_hidden=16, target_layers=2, target_hidden=8, rank=2)
    model = NprModel(spec)
    return Checkpoint(
        kind=ModelKind.NPR,
        problem=BURGERS,
        spec=spec,
        constraints=ConstraintConfig.for_problem(BURGERS),
        d_enc=8,
        params=np.random.default_rng(seed).normal(size=model.param_count()),
        seed=seed,
        steps=17,
    )


def test_dumps_loads_is_byte_identical():
    original = npr_checkpoint()
    data = dumps(original)
    assert data.startswith(MAGIC)
    restored = loads(data)
    np.testing.assert_array_equal(restored.params, original.params)
    assert restored.spec == original.spec
    assert (restored.seed, restored.steps) == (0, 17)
    assert dumps(restored) == data


def test_save_and_load(tmp_path):
    original = npr_checkpoint(3)
    path = save_checkpoint(original, tmp_path / "runs" / "model.npr")
    assert path.is_file()
    assert sorted(p.name for p in path.parent.iterdir()) == ["model.npr"]
    restored = load_checkpoint(path)
    np.testing.assert_array_equal(restored.params, original.params)
    assert restored.problem == BURGERS


def test_save_replaces_existing_file(tmp_path):
    path = tmp_path / "model.npr"
    save_checkpoint(npr_checkpoint(1), path)
    save_checkpoint(npr_checkpoint(2), path)
    assert load_checkpoint(path).seed == 2


def test_corrupted_parameters_fail_checksum():
    data = bytearray(dumps(npr_checkpoint()))
    data[-3] ^= 0xFF
    with pytest.raises(CheckpointFormatError, match="checksum"):
        loads(bytes(data))


def test_bad_magic():
    with pytest.raises(CheckpointFormatError, match="magic"):
        loads(b"NOTNPR\n{}\n")


def test_truncated_file():
    data = dumps(npr_checkpoint())
    with pytest.raises(CheckpointFormatError):
        loads(data[:-8])
    with pytest.raises(CheckpointFormatError, match="terminator"):
        loads(MAGIC + b'{"format_version": 1')


def test_garbage_manifest():
    with pytest.raises(CheckpointFormatError, match="manifest"):
        loads(MAGIC + b"not json\n")


def test_unsupported_version():
    data = dumps(npr_checkpoint())
    data = data.replace(b'"format_version":1', b'"format_version":99', 1)
    with pytest.raises(CheckpointFormatError, match="version"):
        loads(data)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.npr")


def test_parameter_count_is_validated():
    checkpoint = npr_checkpoint()
    with pytest.raises(ValidationError):
        checkpoint.replace(params=checkpoint.params[:-1])


def test_dense_pinn_needs_initial_condition():
    spec = MlpSpec(d_input=2, d_output=1, n_hidden=2, d_hidden=4)
    params = np.zeros(build_model(ModelKind.DENSE_PINN, spec, 8).param_count())
    fields = dict(kind=ModelKind.DENSE_PINN, problem=BURGERS, spec=spec,
                  constraints=ConstraintConfig.for_problem(BURGERS), d_enc=8, params=params)
    with pytest.raises(ValidationError):
        Checkpoint(**fields)
    restored = loads(dumps(Checkpoint(**fields, ic=ICSample.affine(-0.5, 1.5))))
    assert restored.ic == ICSample.affine(-0.5, 1.5)


def test_deeponet_round_trip():
    spec = DeepONetSpec.build(d_enc=8, p_lat=4, branch_layers=1, branch_hidden=6, trunk_layers=1, trunk_hidden=5)
    model = DeepONetModel(spec)
    original = Checkpoint(kind=ModelKind.DEEPONET, problem=BURGERS, spec=spec,
                          constraints=ConstraintConfig.for_problem(BURGERS), d_enc=8,
                          params=model.init_params(np.random.default_rng(0)))
    restored = loads(dumps(original))
    assert restored.spec == spec
    assert isinstance(restored.model(), DeepONetModel)


def test_build_model_checks_spec_type():
    spec = MlpSpec(d_input=2, d_output=1, n_hidden=2, d_hidden=4)
    with pytest.raises(ValueError):
        build_model(ModelKind.NPR, spec, 8)
