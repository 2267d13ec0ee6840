import logging

import numpy as np
import pytest
import torch

from padtok.checkpoint import CheckpointState, config_diff, load_checkpoint, save_checkpoint
from padtok.errors import ComponentMismatch, DataError, IntegrityError
from padtok.pipeline import load_tokenizer, tokenizer_checkpoint
from padtok.tokenfile import read_token_file, write_token_file
from padtok.training import new_tokenizer_state

from conftest import tiny_config


def sample_state(component="tokenizer"):
    g = torch.Generator().manual_seed(0)
    tensors = {"w": torch.randn(3, 4, generator=g), "b": torch.randn(4, dtype=torch.float64, generator=g),
               "idx": torch.arange(5), "flag": torch.tensor([1, 0], dtype=torch.uint8)}
    return CheckpointState(component, tensors, tiny_config(), b"\x01\x02rng", step=7)


def test_checkpoint_round_trip(tmp_path):
    st = sample_state()
    save_checkpoint(st, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt", "tokenizer")
    assert back.component == "tokenizer" and back.step == 7 and back.rng_state == b"\x01\x02rng"
    assert back.config.to_dict() == st.config.to_dict()
    for name, t in st.tensors.items():
        assert back.tensors[name].dtype == t.dtype
        assert torch.equal(back.tensors[name], t)


def test_save_is_idempotent(tmp_path):
    save_checkpoint(sample_state(), tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_tokenizer_state_round_trip(tmp_path):
    cfg = tiny_config()
    state = new_tokenizer_state(cfg)
    state.model.quantizer.usage_counts += 3
    save_checkpoint(tokenizer_checkpoint(state, cfg, torch.Generator().manual_seed(0)), tmp_path / "t.ckpt")
    back, back_cfg = load_tokenizer(tmp_path / "t.ckpt")
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(back.model.tokenize(x), state.model.tokenize(x))
    for (n, a), (_, b) in zip(state.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), n
    assert back_cfg.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("cut", [1, 100, 10_000])
def test_truncation_detected(tmp_path, cut):
    save_checkpoint(sample_state(), tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "c.ckpt").write_bytes(raw[:max(0, len(raw) - cut)])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "c.ckpt")


def test_flipped_payload_byte_detected(tmp_path):
    save_checkpoint(sample_state(), tmp_path / "a.ckpt")
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    raw[-3] ^= 0xFF
    (tmp_path / "c.ckpt").write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "c.ckpt")


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_component_mismatch(tmp_path):
    save_checkpoint(sample_state("ar-model"), tmp_path / "a.ckpt")
    with pytest.raises(ComponentMismatch):
        load_checkpoint(tmp_path / "a.ckpt", "tokenizer")
    with pytest.raises(ComponentMismatch):
        load_tokenizer(tmp_path / "a.ckpt")
    with pytest.raises(ValueError):
        CheckpointState("encoder", {}, tiny_config())


def test_config_mismatch_reported(tmp_path, caplog):
    save_checkpoint(sample_state(), tmp_path / "a.ckpt")
    other = tiny_config(lambda_end=0.25)
    with caplog.at_level(logging.WARNING):
        back = load_checkpoint(tmp_path / "a.ckpt", current=other)
    assert back.config_mismatch == ["lambda_end"]
    assert "lambda_end" in caplog.text
    assert back.config.lambda_end == tiny_config().lambda_end
    assert config_diff(tiny_config(), tiny_config()) == []


def test_token_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    codes = rng.integers(0, 512, (10, 16))
    labels = rng.integers(0, 4, 10)
    write_token_file(tmp_path / "t.bin", codes, labels, 512)
    ts = read_token_file(tmp_path / "t.bin")
    assert ts.codebook_size == 512 and ts.length == 16 and len(ts) == 10
    assert ts.codes.tolist() == codes.tolist() and ts.labels.tolist() == labels.tolist()
    assert (tmp_path / "t.bin").stat().st_size == 16 + 10 * 17 * 2


def test_token_file_errors(tmp_path):
    with pytest.raises(DataError):
        write_token_file(tmp_path / "t.bin", [[0, 512]], [0], 512)
    with pytest.raises(DataError):
        write_token_file(tmp_path / "t.bin", [[0, 1]], [0, 1], 512)
    write_token_file(tmp_path / "t.bin", [[0, 1], [2, 3]], [0, 1], 8)
    raw = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-2])
    with pytest.raises(IntegrityError):
        read_token_file(tmp_path / "cut.bin")
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(IntegrityError):
        read_token_file(tmp_path / "bad.bin")
    # a code beyond the declared codebook
    (tmp_path / "big.bin").write_bytes(raw[:-2] + (9).to_bytes(2, "little"))
    with pytest.raises(DataError):
        read_token_file(tmp_path / "big.bin")
