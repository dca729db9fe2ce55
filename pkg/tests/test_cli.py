import csv
from fractions import Fraction

import pytest
import torch

from hdcvc import data
from hdcvc.cli import main
from hdcvc.nets import HDCVC, NetworkConfig
from hdcvc.pipeline import load_checkpoint, save_checkpoint
from hdcvc.pipeline.codec import GopConfig, encode_sequence, quantize_8bit

TINY = NetworkConfig(base_channels=6, latent_channels=4, hyper_channels=3, mfer_channels=6)


@pytest.fixture
def ckpt(tmp_path):
    torch.manual_seed(0)
    model = HDCVC(TINY)
    with torch.no_grad():
        model.mfer.out.weight.normal_(0, 0.05)
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(model, path, {"lambda_index": 1})
    return path


@pytest.fixture
def clip(tmp_path):
    out = tmp_path / "clip"
    assert main(["synth", "--pattern", "translate", "--out", str(out), "--frames", "4", "--dx", "2"]) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_rd(path, points):
    with open(path, "w") as fh:
        fh.write("lambda_index,bpp,quality\n")
        for i, (r, q) in enumerate(points):
            fh.write(f"{i},{r},{q}\n")


class TestSynth:
    def test_translation_is_exact_shift(self, clip):
        frames = data.load_sequence(clip)
        assert len(frames) == 4
        assert torch.equal(frames[1], torch.roll(frames[0], shifts=2, dims=3))


class TestCostReport:
    def test_table(self, capsys):
        assert main(["cost-report"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        table = {ln.split()[0]: ln.split()[1:] for ln in lines[1:]}
        assert table["3x3"] == ["20736", "1"]
        assert table["het"] == ["26880", "35/27"]
        assert table["5x5"][0] == "57600"
        assert Fraction(int(table["het"][0]), int(table["5x5"][0])) == Fraction(7, 15)

    def test_config_override(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"height": 32, "width": 32}')
        assert main(["cost-report", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "82944" in out and "35/27" in out


class TestCodecCommands:
    def test_encode_decode_exact(self, tmp_path, ckpt, clip):
        bs, rec, report = tmp_path / "s.bin", tmp_path / "rec", tmp_path / "r.csv"
        assert main(["encode", "--ckpt", str(ckpt), "--in", str(clip), "--out", str(bs), "--intra-period", "3",
                     "--report", str(report)]) == 0
        assert main(["decode", "--ckpt", str(ckpt), "--in", str(bs), "--out", str(rec)]) == 0
        model, _ = load_checkpoint(ckpt)
        frames = data.load_sequence(clip)
        expect = encode_sequence(frames, model, GopConfig(3, 4, 64, 64), 1)
        assert bs.read_bytes() == expect.bitstream.to_bytes()
        for got, want in zip(data.load_sequence(rec), expect.shown):
            assert torch.equal(got, quantize_8bit(want))
        rows = read_csv(report)
        assert [int(r["frame_index"]) for r in rows] == [0, 1, 2, 3]

    def test_eval_matches_encoder_report(self, tmp_path, ckpt, clip):
        bs, rec, r1, r2 = tmp_path / "s.bin", tmp_path / "rec", tmp_path / "a.csv", tmp_path / "b.csv"
        main(["encode", "--ckpt", str(ckpt), "--in", str(clip), "--out", str(bs), "--report", str(r1)])
        main(["decode", "--ckpt", str(ckpt), "--in", str(bs), "--out", str(rec)])
        assert main(["eval", "--ref", str(clip), "--dist", str(rec), "--report", str(r2), "--bitstream", str(bs)]) == 0
        assert read_csv(r1) == read_csv(r2)

    def test_no_mfer_same_bits(self, tmp_path, ckpt, clip):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        main(["encode", "--ckpt", str(ckpt), "--in", str(clip), "--out", str(a)])
        main(["encode", "--ckpt", str(ckpt), "--in", str(clip), "--out", str(b), "--no-mfer"])
        assert a.read_bytes() == b.read_bytes()

    def test_reports_byte_stable(self, tmp_path, ckpt, clip):
        outs = []
        for i in range(2):
            report = tmp_path / f"r{i}.csv"
            main(["encode", "--ckpt", str(ckpt), "--in", str(clip), "--out", str(tmp_path / f"s{i}.bin"),
                  "--report", str(report)])
            outs.append(report.read_bytes())
        assert outs[0] == outs[1]

    def test_eval_identity(self, tmp_path, clip):
        report = tmp_path / "r.csv"
        assert main(["eval", "--ref", str(clip), "--dist", str(clip), "--report", str(report)]) == 0
        rows = read_csv(report)
        assert all(float(r["psnr_db"]) == 100.0 and float(r["msssim"]) == pytest.approx(1.0) for r in rows)


class TestBdbr:
    def test_values(self, tmp_path, capsys):
        anchor = [(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)]
        write_rd(tmp_path / "a.csv", anchor)
        write_rd(tmp_path / "t.csv", [(1.1 * r, q) for r, q in anchor])
        assert main(["bdbr", "--anchor", str(tmp_path / "a.csv"), "--test", str(tmp_path / "a.csv")]) == 0
        assert float(capsys.readouterr().out) == pytest.approx(0.0, abs=1e-4)
        assert main(["bdbr", "--anchor", str(tmp_path / "a.csv"), "--test", str(tmp_path / "t.csv")]) == 0
        assert float(capsys.readouterr().out) == pytest.approx(10.0, abs=0.1)

    def test_too_few_points(self, tmp_path, capsys):
        write_rd(tmp_path / "a.csv", [(0.1, 30.0), (0.2, 33.0), (0.4, 36.0)])
        assert main(["bdbr", "--anchor", str(tmp_path / "a.csv"), "--test", str(tmp_path / "a.csv")]) == 1
        assert "4 points" in capsys.readouterr().err


class TestErrors:
    def test_corrupt_bitstream_no_output(self, tmp_path, ckpt, clip, capsys):
        bs, rec = tmp_path / "s.bin", tmp_path / "rec"
        main(["encode", "--ckpt", str(ckpt), "--in", str(clip), "--out", str(bs)])
        data_ = bytearray(bs.read_bytes())
        data_[-1] ^= 0xFF
        bs.write_bytes(bytes(data_))
        assert main(["decode", "--ckpt", str(ckpt), "--in", str(bs), "--out", str(rec)]) == 1
        assert "error" in capsys.readouterr().err
        assert not rec.exists()
        assert not any(p.name.startswith(".rec") for p in tmp_path.iterdir())

    def test_bad_extents_no_output(self, tmp_path, ckpt):
        frames = data.synth_clip("noise", 2, 64)
        odd = tmp_path / "odd"
        data.save_sequence([f[:, :, :48] for f in frames], odd)
        out = tmp_path / "s.bin"
        assert main(["encode", "--ckpt", str(ckpt), "--in", str(odd), "--out", str(out)]) == 1
        assert not out.exists()

    def test_missing_input(self, tmp_path, ckpt, capsys):
        assert main(["encode", "--ckpt", str(ckpt), "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
        assert capsys.readouterr().err.startswith("hdcvc encode: error:")

    def test_bad_checkpoint(self, tmp_path, clip):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        assert main(["encode", "--ckpt", str(bad), "--in", str(clip), "--out", str(tmp_path / "o")]) == 1

    def test_eval_length_mismatch(self, tmp_path, clip):
        short = tmp_path / "short"
        data.save_sequence(data.load_sequence(clip)[:2], short)
        report = tmp_path / "r.csv"
        assert main(["eval", "--ref", str(clip), "--dist", str(short), "--report", str(report)]) == 1
        assert not report.exists()


class TestTrainCommand:
    def test_train_then_encode(self, tmp_path, clip, monkeypatch, capsys):
        import hdcvc.cli as cli

        monkeypatch.setattr(cli, "DESK", TINY)
        out1, out2 = tmp_path / "s1.ckpt", tmp_path / "s2.ckpt"
        assert main(["train", "--stage", "1", "--data", str(clip), "--steps", "2", "--batch", "1", "--out", str(out1)]) == 0
        assert main(["train", "--stage", "2", "--data", str(clip), "--steps", "2", "--batch", "1", "--init", str(out1),
                     "--out", str(out2)]) == 0
        _, meta = load_checkpoint(out2)
        assert [s["stage"] for s in meta["stages"]] == [1, 2]
        assert meta["lambda_index"] == 2
        assert main(["encode", "--ckpt", str(out2), "--in", str(clip), "--out", str(tmp_path / "s.bin")]) == 0
