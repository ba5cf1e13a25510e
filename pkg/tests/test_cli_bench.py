import csv
import json

import numpy as np
import pytest

from lcmf.bench import BENCH_HEADER, cmd_bench, doubling_lengths, flops_table, loglog_slope, write_bench_csv
from lcmf.cli import main
from lcmf.config import ModelConfig, load_config
from lcmf.data import load_manifest
from lcmf.sam import flops_attention
from lcmf.tensor import ConfigurationError

TINY_INI = """[model]
d_model = 8
heads = 2
image_side = 8
patch_size = 4
encoder_layers = 1
decoder_layers = 1
text_layers = 1
max_len = 16
state_dim = 2
conv_width = 2
fusion_depth = 1

[train]
epochs = 1
batch_size = 4
"""


@pytest.fixture
def ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI, encoding="utf-8")
    return path


@pytest.fixture
def data(tmp_path, ini):
    out = tmp_path / "data"
    with pytest.warns(UserWarning):
        assert main(["gen-data", "--config", str(ini), "--seed", "1", "--n", "8", "--out", str(out)]) == 0
    return out


class TestCLI:
    def test_gen_data(self, tmp_path):
        with pytest.warns(UserWarning):
            assert main(["gen-data", "--seed", "1", "--n", "64", "--out", str(tmp_path)]) == 0
        assert len(load_manifest(tmp_path / "manifest.jsonl")) == 64
        assert len(list((tmp_path / "images").glob("*.ppm"))) == 64
        assert (tmp_path / "config.ini").exists()

    def test_pipeline(self, tmp_path, ini, data, capsys):
        m = str(data / "manifest.jsonl")
        pre, ft, ev = (str(tmp_path / d) for d in ("pre", "ft", "ev"))
        assert main(["pretrain", "--config", str(ini), "--manifest", m, "--out", pre]) == 0
        assert main(["finetune", "--config", str(ini), "--manifest", m, "--out", ft,
                     "--checkpoint", f"{pre}/checkpoint.lcmf"]) == 0
        capsys.readouterr()
        assert main(["eval", "--config", str(ini), "--manifest", m, "--out", ev,
                     "--checkpoint", f"{ft}/checkpoint.lcmf", "--split", "train"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report == json.loads((tmp_path / "ev" / "eval.json").read_text())
        assert report["records"] == 6
        for d in (pre, ft, ev):
            assert load_config(f"{d}/config.ini").model.d_model == 8

    def test_zero_epoch_pretrain(self, tmp_path, ini, data):
        m = str(data / "manifest.jsonl")
        for name in ("a", "b"):
            assert main(["pretrain", "--config", str(ini), "--manifest", m, "--epochs", "0",
                         "--seed", "4", "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a/checkpoint.lcmf").read_bytes() == (tmp_path / "b/checkpoint.lcmf").read_bytes()

    def test_flags_reach_config(self, tmp_path, ini, data):
        out = tmp_path / "pre"
        assert main(["pretrain", "--config", str(ini), "--manifest", str(data / "manifest.jsonl"), "--epochs", "0",
                     "--ablate", "cmm", "sam", "--stable-mode", "off", "--paper-literal", "--seed", "9",
                     "--out", str(out)]) == 0
        cfg = load_config(out / "config.ini")
        assert cfg.model.no_cmm and cfg.model.no_sam and not cfg.model.no_cross_attention
        assert not cfg.model.stable_mode and cfg.model.paper_literal
        assert cfg.train.seed == 9 and cfg.train.epochs == 0

    def test_empty_manifest(self, tmp_path, capsys):
        (tmp_path / "m.jsonl").write_text("", encoding="utf-8")
        code = main(["eval", "--manifest", str(tmp_path / "m.jsonl"), "--checkpoint", "x", "--out", str(tmp_path)])
        assert code == 2 and "empty" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path):
        assert main(["pretrain", "--manifest", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 2

    @pytest.mark.parametrize("argv", [
        ["pretrain", "--bogus"],
        ["frobnicate"],
        ["flops", "--ablate", "decoder"],
        ["flops", "--stable-mode", "maybe"],
        ["eval", "--manifest", "m.jsonl"],
        [],
    ])
    def test_usage_errors_exit_2(self, argv, capsys):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2

    def test_bad_config_exits_2(self, tmp_path):
        (tmp_path / "bad.ini").write_text("[model]\ncolour = red\n", encoding="utf-8")
        assert main(["flops", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path)]) == 2

    def test_failed_run_exits_1(self, tmp_path, ini, data):
        m = str(data / "manifest.jsonl")
        assert main(["eval", "--config", str(ini), "--manifest", m, "--checkpoint", str(tmp_path / "none.lcmf"),
                     "--out", str(tmp_path)]) == 1

    def test_flops_command(self, tmp_path, capsys):
        assert main(["flops", "--out", str(tmp_path)]) == 0
        rows = json.loads((tmp_path / "flops.json").read_text())
        assert rows["total"] == sum(v for k, v in rows.items() if k != "total")
        assert "total" in capsys.readouterr().out

    def test_bench_command(self, tmp_path):
        argv = ["bench", "--lengths", "8", "16", "32", "64", "--d-model", "16", "--repeats", "1", "--out", str(tmp_path)]
        assert main(argv) == 0
        with open(tmp_path / "bench.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == BENCH_HEADER and len(rows) == 5
        assert (tmp_path / "config.ini").exists()

    def test_bench_needs_four_lengths(self, tmp_path):
        assert main(["bench", "--lengths", "8", "16", "32", "--out", str(tmp_path)]) == 2


class TestFlopsTable:
    def test_additive(self):
        rows = flops_table(ModelConfig())
        assert rows["total"] == sum(v for k, v in rows.items() if k != "total")

    @pytest.mark.parametrize("ablation", ["cmm", "sam", "cross_attention"])
    def test_ablation_reduces_total(self, ablation):
        assert flops_table(ModelConfig().ablated(ablation))["total"] < flops_table(ModelConfig())["total"]

    def test_cross_attention_touches_only_fusion(self):
        full = flops_table(ModelConfig())
        bare = flops_table(ModelConfig(no_cross_attention=True))
        changed = {k for k in full if k != "total" and full[k] != bare[k]}
        assert changed == {"fusion_attention"}
        assert bare["fusion_attention"] == 0

    def test_frames_scale_visual_rows(self):
        one, three = flops_table(ModelConfig(), frames=1), flops_table(ModelConfig(), frames=3)
        assert three["text_encoder"] == one["text_encoder"]
        assert three["total"] > one["total"]


class TestBench:
    def test_report(self):
        r = cmd_bench([8, 16, 32, 64], d_model=8, repeats=1, heads=2)
        assert r.lengths == [8, 16, 32, 64]
        assert r.doubling_ratios("cmm") == [2.0, 2.0, 2.0]
        assert all(x > 2 for x in r.doubling_ratios("attn"))
        assert r.flops_slope_cmm == pytest.approx(1.0, abs=1e-12)
        assert all(t > 0 for t in r.cmm_ns + r.attn_ns)

    def test_attention_flops_match_counter(self):
        r = cmd_bench([4, 8, 16, 32], d_model=8, repeats=1, heads=2)
        assert r.attn_flops == [flops_attention(L, 8, 2) for L in r.lengths]

    def test_repeats(self):
        with pytest.raises(ConfigurationError):
            cmd_bench([4, 8, 16, 32], d_model=8, repeats=0)

    @pytest.mark.parametrize("lengths", [[8, 16, 32], [8, 8, 16, 32], [0, 1, 2, 3], [64, 32, 16, 8]])
    def test_invalid_lengths(self, lengths):
        with pytest.raises(ConfigurationError):
            cmd_bench(lengths, d_model=8, repeats=1)

    def test_csv(self, tmp_path):
        r = cmd_bench([4, 8, 16, 32], d_model=8, repeats=1, heads=2)
        write_bench_csv(r, tmp_path / "b.csv")
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == "length,cmm_ns,attn_ns,cmm_flops,attn_flops"
        assert [int(x.split(",")[0]) for x in lines[1:]] == [4, 8, 16, 32]

    def test_loglog_slope(self):
        x = np.array([2.0, 4.0, 8.0, 16.0])
        assert loglog_slope(x, 3 * x**2) == pytest.approx(2.0, abs=1e-12)

    def test_default_lengths(self):
        assert doubling_lengths() == [256, 512, 1024, 2048, 4096, 8192]
