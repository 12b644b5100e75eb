import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from avsekd import losses, media, training
from avsekd.checkpoint import CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from avsekd.corpus import load_utterance, mix_at_snr, synth_noise, synth_utterance
from avsekd.losses import LossWeights
from avsekd.metrics import segsnr
from avsekd.model import ModelConfig, build_student, build_teacher, parameter_checksum
from avsekd.spectral import SpectralConfig
from avsekd.training import (
    PlateauSchedule,
    TrainConfig,
    enhance,
    enhance_arrays,
    log_series,
    oracle_enhance,
    read_log,
    train_student,
    train_teacher,
)

from conftest import TINY_MODEL


# ---------------------------------------------------------------------------
# plateau schedule


def lr_trajectory(values, lr=1e-3, factor=0.1, patience=10):
    schedule = PlateauSchedule(lr, factor, patience)
    used = []
    for v in values:
        used.append(schedule.lr)
        schedule.step(v)
    return used, schedule.lr


def test_eleven_flat_epochs_decay_once():
    used, after = lr_trajectory([1.0] * 11)
    assert used == [1e-3] * 11
    assert after == pytest.approx(1e-4, rel=0, abs=1e-19)


def test_ten_flat_epochs_do_not_decay():
    _, after = lr_trajectory([1.0] * 10)
    assert after == 1e-3


def test_improvement_resets_counter():
    # nine stale epochs, one improvement, nine stale: never reaches patience
    values = [1.0] + [1.0] * 9 + [0.5] + [0.5] * 9
    _, after = lr_trajectory(values)
    assert after == 1e-3


def test_counter_resets_after_decay():
    _, after = lr_trajectory([1.0] * 21)
    assert after == pytest.approx(1e-5)
    _, after = lr_trajectory([1.0] * 20)
    assert after == pytest.approx(1e-4)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=60), st.integers(1, 6))
def test_schedule_properties(values, patience):
    schedule = PlateauSchedule(1e-3, 0.5, patience)
    best = float("inf")
    since = 0
    lr = 1e-3
    for v in values:
        before = schedule.lr
        schedule.step(v)
        assert schedule.lr <= before
        if v < best:
            best, since = v, 0
        else:
            since += 1
            if since >= patience:
                lr *= 0.5
                since = 0
        assert schedule.since_improvement == since
        assert schedule.lr == lr


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(decay_factor=1.0)
    with pytest.raises(ValueError):
        TrainConfig(plateau_patience=0)


# ---------------------------------------------------------------------------
# checkpoints


def probe_inputs(kind, t=9, seed=0):
    g = torch.Generator().manual_seed(seed)
    noisy = torch.randn(2, 2, 257, t, generator=g)
    lips = torch.randn(2, 3, t, 64, 128, generator=g)
    tongues = torch.randn(2, 3, t, 64, 128, generator=g)
    return (noisy, lips, tongues) if kind == "teacher" else (noisy, lips)


@pytest.mark.parametrize("builder", [build_teacher, build_student])
def test_checkpoint_round_trip(tmp_path, builder):
    net = builder(TINY_MODEL, 7).eval()
    path = save_checkpoint(tmp_path / "net.avck", net)
    loaded, meta = load_checkpoint(path)
    assert meta["kind"] == net.kind
    assert loaded.config == net.config
    assert parameter_checksum(loaded) == parameter_checksum(net)
    x = probe_inputs(net.kind)
    with torch.no_grad():
        assert torch.equal(net(*x).mask, loaded(*x).mask)
    again = save_checkpoint(tmp_path / "again.avck", loaded)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_layout():
    data = encode({"w": np.arange(6.0).reshape(2, 3)}, {"kind": "student"})
    assert data[:4] == b"AVCK"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:12], "little") == 1
    assert int.from_bytes(data[12:14], "little") == 1 and data[14:15] == b"w"
    assert data[15] == 2
    assert np.frombuffer(data[16:24], "<u4").tolist() == [2, 3]
    assert np.frombuffer(data[24:72], "<f8").tolist() == [0, 1, 2, 3, 4, 5]
    assert int.from_bytes(data[72:76], "little") == len(b"kind=student\n")
    assert data[76:] == b"kind=student\n"
    tensors, meta = decode(data)
    assert meta == {"kind": "student"} and tensors["w"].shape == (2, 3)


def test_checkpoint_rejects_corruption(tmp_path):
    net = build_student(TINY_MODEL, 0)
    data = save_checkpoint(tmp_path / "n.avck", net).read_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        decode(data[: len(data) // 2])
    bad = tmp_path / "bad.avck"
    bad.write_bytes(encode({"w": np.zeros(1)}, {"kind": "student", **TINY_MODEL.to_dict()}))
    with pytest.raises(CheckpointError, match="tensor mismatch"):
        load_checkpoint(bad)


# ---------------------------------------------------------------------------
# training loops (tiny corpus, tiny model)

FAST = dict(max_epochs=2, batch_size=2)


@pytest.fixture(scope="module")
def teacher_run(tiny_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("teacher")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        path = train_teacher(tiny_corpus, TINY_MODEL, TrainConfig(**FAST), out)
    return path


def test_teacher_log_layout(teacher_run):
    rows = read_log(teacher_run.with_name("teacher_log.tsv"))
    valid = [(e, n) for e, s, n, _, _ in rows if s == "valid"]
    assert valid == [(e, n) for e in range(3) for n in ("loss", "mask", "stft")]
    train_rows = [r for r in rows if r[1] == "train"]
    assert {r[0] for r in train_rows} == {1, 2}
    assert all(r[4] == 1e-3 for r in rows)
    stft = log_series(teacher_run.with_name("teacher_log.tsv"), "valid", "stft")
    assert len(stft) == 3 and all(np.isfinite(stft))


def test_teacher_training_deterministic(teacher_run, tiny_corpus, tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        again = train_teacher(tiny_corpus, TINY_MODEL, TrainConfig(**FAST), tmp_path)
    assert again.read_bytes() == teacher_run.read_bytes()
    assert again.with_name("teacher_log.tsv").read_bytes() == teacher_run.with_name("teacher_log.tsv").read_bytes()


def test_checkpoint_is_best_validation_epoch(teacher_run):
    _, meta = load_checkpoint(teacher_run)
    losses_by_epoch = log_series(teacher_run.with_name("teacher_log.tsv"), "valid", "loss")
    best_epoch = int(meta["best_epoch"])
    assert best_epoch == 1 + int(np.argmin(losses_by_epoch[1:]))


def test_zero_gammas_match_teacher_free_run(teacher_run, tiny_corpus, tmp_path):
    cfg = TrainConfig(**FAST, weights=LossWeights(gamma1=0.0, gamma2=0.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with_teacher = train_student(tiny_corpus, TINY_MODEL, cfg, tmp_path / "a", teacher_run)
        without = train_student(tiny_corpus, TINY_MODEL, cfg, tmp_path / "b", None)
    assert with_teacher.read_bytes() == without.read_bytes()


def test_student_distillation_leaves_teacher_untouched(teacher_run, tiny_corpus, tmp_path):
    before = teacher_run.read_bytes()
    teacher, _ = load_checkpoint(teacher_run)
    checksum = parameter_checksum(teacher)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        teacher.eval()
        student = build_student(TINY_MODEL, 0)
        training._train(student, tiny_corpus, TrainConfig(**FAST), tmp_path, teacher)
    assert parameter_checksum(teacher) == checksum
    assert all(not p.requires_grad for p in teacher.parameters())
    assert teacher_run.read_bytes() == before
    path = tmp_path / "student.avck"
    rows = read_log(path.with_name("student_log.tsv"))
    assert max(r[0] for r in rows) == 2


def test_student_rejects_mismatched_teacher(teacher_run, tiny_corpus, tmp_path):
    other = ModelConfig(base_channels=3, articulation_channels=(2, 2, 2), lstm_hidden=8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValueError, match="trace shape mismatch"):
            train_student(tiny_corpus, other, TrainConfig(**FAST), tmp_path, teacher_run)
    assert not (tmp_path / "student_log.tsv").exists()


def test_non_finite_loss_aborts(tiny_corpus, tmp_path, monkeypatch):
    monkeypatch.setattr(training, "loss_stft", lambda a, b: torch.tensor(float("nan")) + (a - b).sum() * 0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(FloatingPointError, match="epoch 1, batch 0"):
            train_teacher(tiny_corpus, TINY_MODEL, TrainConfig(**FAST), tmp_path)


def test_empty_split_rejected(tiny_corpus, tmp_path):
    from avsekd.corpus import CorpusManifest

    no_valid = CorpusManifest([r for r in tiny_corpus.records if r.split != "valid"],
                              [a for a in tiny_corpus.noise_plan if not a.utt_id.startswith("valid")],
                              tiny_corpus.root)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValueError, match="valid split is empty"):
            train_teacher(no_valid, TINY_MODEL, TrainConfig(**FAST), tmp_path)


# ---------------------------------------------------------------------------
# inference


def write_inputs(tmp_path, tiny_corpus, zero=False):
    record = tiny_corpus.split("test")[0]
    utt = load_utterance(tiny_corpus, record)
    wav = tmp_path / "noisy.wav"
    media.write_wav(wav, np.zeros_like(utt.noisy) if zero else utt.noisy)
    return wav, tiny_corpus.root / record.lip_path, tiny_corpus.root / record.tongue_path


def test_enhance_output_length_and_determinism(teacher_run, tiny_corpus, tmp_path):
    wav, lip, tongue = write_inputs(tmp_path, tiny_corpus)
    out = enhance(teacher_run, wav, lip, tongue, tmp_path / "a.wav")
    enhance(teacher_run, wav, lip, tongue, tmp_path / "b.wav")
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()
    noisy, sr = media.read_wav(wav)
    lip_frames, _ = media.read_uvf(lip)
    cfg = SpectralConfig()
    n = min(cfg.n_frames(len(noisy)), len(lip_frames), len(media.read_uvf(tongue)[0]))
    assert len(out) == (n - 1) * cfg.hop_length + cfg.win_length
    assert media.read_wav(tmp_path / "a.wav")[1] == 16000


def test_enhance_zero_input_gives_zero_output(teacher_run, tiny_corpus, tmp_path):
    wav, lip, tongue = write_inputs(tmp_path, tiny_corpus, zero=True)
    out = enhance(teacher_run, wav, lip, tongue)
    assert np.all(out == 0)


def test_enhance_modality_contract(teacher_run, tiny_corpus, tmp_path):
    wav, lip, tongue = write_inputs(tmp_path, tiny_corpus)
    with pytest.raises(ValueError, match="tongue"):
        enhance(teacher_run, wav, lip, None)
    student = save_checkpoint(tmp_path / "s.avck", build_student(TINY_MODEL, 0).eval())
    with pytest.warns(UserWarning, match="ignores the tongue"):
        with_tongue = enhance(student, wav, lip, tongue)
    without = enhance(student, wav, lip)
    assert np.array_equal(with_tongue, without)


def test_oracle_enhancement_ceiling():
    clean = synth_utterance(11, 2.0).audio
    noisy = mix_at_snr(clean, synth_noise("babble_like", len(clean) + 16000, 3), -7.5, 3)
    out = oracle_enhance(clean, noisy)
    n = len(out)
    assert segsnr(clean[:n], out) >= 30.0
    assert segsnr(clean[:n], noisy[:n]) < 5.0
