import csv
import json

import pytest

from ctrlprefix import checkpoint
from ctrlprefix.cli import main
from ctrlprefix.prefix import param_count
from ctrlprefix.tasks import gen_length_task, gen_toy_d2t, write_jsonl

CONFIG = """\
seed = 1
[model]
d = 16
layers = 1
heads = 2
ffn_dim = 32
max_len = 48
[prefix]
rho = 2
k = 8
[train]
lr = 0.01
total_steps = 6
batch = 8
eval_every = 3
[decode]
max_len = 24
[data]
val_fraction = 0.2
special_tokens = <H>
[schema]
category = *
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = gen_toy_d2t(0, 40, R=2, n_unseen=6)
    write_jsonl(data.seen, root / "train.jsonl")
    write_jsonl(data.seen[:5], root / "seen.jsonl")
    write_jsonl(data.unseen, root / "unseen.jsonl")
    (root / "run.cfg").write_text(CONFIG)
    assert main(["train", str(root / "run.cfg"), str(root / "train.jsonl"), str(root / "m.ckpt")]) == 0
    return root


def read_records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_train_writes_checkpoint_and_log(workspace, capsys):
    model, header = checkpoint.load(workspace / "m.ckpt")
    log = read_records(workspace / "m.ckpt.metrics.jsonl")
    assert [r["step"] for r in log] == list(range(1, 7))
    assert all({"step", "loss", "lr"} <= set(r) for r in log)
    assert [r["step"] for r in log if "val_metric" in r] == [3, 6]
    params = header["extra"]["params"]
    counts = param_count(model.schema, model.config, model.prefix_config)
    assert all(params[k] == v for k, v in counts.items())
    frozen = sum(p.data.size for p in model.frozen_parameters())
    folded = counts["inference_expanded"] + 16  # plus the one trainable special-token row
    assert params["pct_additional"] == pytest.approx(100 * folded / frozen)
    assert model.special_tokens == ["<H>"]


def test_rerun_is_byte_identical(workspace):
    out = workspace / "again.ckpt"
    assert main(["train", str(workspace / "run.cfg"), str(workspace / "train.jsonl"), str(out)]) == 0
    assert out.read_bytes() == (workspace / "m.ckpt").read_bytes()
    assert out.with_name("again.ckpt.metrics.jsonl").read_bytes() == \
        (workspace / "m.ckpt.metrics.jsonl").read_bytes()


def test_seed_flag_changes_the_run(workspace):
    out = workspace / "s2.ckpt"
    assert main(["train", str(workspace / "run.cfg"), str(workspace / "train.jsonl"), str(out), "--seed", "2"]) == 0
    assert out.read_bytes() != (workspace / "m.ckpt").read_bytes()
    assert checkpoint.load(out)[1]["seed"] == 2


def test_malformed_config_exit_code(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nd = 16\nlayers two\n")
    assert main(["train", str(bad), str(workspace / "train.jsonl"), str(tmp_path / "x.ckpt")]) == 1
    assert f"{bad}:3" in capsys.readouterr().err


def test_data_errors_exit_code(workspace, tmp_path):
    broken = tmp_path / "broken.jsonl"
    broken.write_text("not json\n")
    assert main(["train", str(workspace / "run.cfg"), str(broken), str(tmp_path / "x.ckpt")]) == 2
    assert main(["train", str(workspace / "run.cfg"), str(tmp_path / "missing.jsonl"), str(tmp_path / "x")]) == 2
    assert main(["generate", str(tmp_path / "missing.ckpt"), str(workspace / "seen.jsonl")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(workspace, tmp_path):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text(CONFIG.replace("lr = 0.01", "lr = inf"))
    assert main(["train", str(cfg), str(workspace / "train.jsonl"), str(tmp_path / "x.ckpt")]) == 3


def test_generate_seen_labels(workspace, tmp_path, capsys):
    out = tmp_path / "gen.jsonl"
    assert main(["generate", str(workspace / "m.ckpt"), str(workspace / "seen.jsonl"), "--out", str(out),
                 "--beam", "3", "--no-repeat-trigram"]) == 0
    records = read_records(out)
    assert len(records) == 5 and all("output" in r and "error" not in r for r in records)
    assert all(r["guidance"]["category"] == r["attrs"]["category"] for r in records)
    assert "5 records, 0 errors" in capsys.readouterr().err


def test_generate_unseen_without_flags_reports_errors(workspace, tmp_path, capsys):
    out = tmp_path / "gen.jsonl"
    assert main(["generate", str(workspace / "m.ckpt"), str(workspace / "unseen.jsonl"), "--out", str(out)]) == 0
    records = read_records(out)
    assert all("error" in r and "output" not in r for r in records)
    assert "6 records, 6 errors" in capsys.readouterr().err


def test_generate_zero_shot_uses_mapped_label(workspace, tmp_path, caplog):
    out = tmp_path / "gen.jsonl"
    with caplog.at_level("INFO", logger="ctrlprefix"):
        assert main(["generate", str(workspace / "m.ckpt"), str(workspace / "unseen.jsonl"), "--out", str(out),
                     "--zero-shot"]) == 0
    expected = {"Athlete": "SportsTeam", "Airline": "Airport"}
    for r in read_records(out):
        want = expected[r["attrs"]["category"]]
        assert r["guidance"]["category"] == want and r["zero_shot"] == {"category": want}
    assert "zero-shot: category=Athlete -> SportsTeam" in caplog.text


def test_generate_oov_uses_oov_prefix(workspace, tmp_path):
    out = tmp_path / "gen.jsonl"
    assert main(["generate", str(workspace / "m.ckpt"), str(workspace / "unseen.jsonl"), "--out", str(out),
                 "--oov"]) == 0
    assert all(r["guidance"]["category"] == "<oov>" for r in read_records(out))


def test_generate_custom_fixture(workspace, tmp_path):
    fixture = tmp_path / "fx.tsv"
    fixture.write_text("Airport\t1 0\nSportsTeam\t0 1\nAthlete\t1 0.1\nAirline\t0.1 1\n")
    out = tmp_path / "gen.jsonl"
    assert main(["generate", str(workspace / "m.ckpt"), str(workspace / "unseen.jsonl"), "--out", str(out),
                 f"--zero-shot={fixture}"]) == 0
    flipped = {"Athlete": "Airport", "Airline": "SportsTeam"}
    assert all(r["guidance"]["category"] == flipped[r["attrs"]["category"]] for r in read_records(out))


def test_evaluate_and_fold(workspace, tmp_path, capsys):
    assert main(["evaluate", str(workspace / "m.ckpt"), str(workspace / "seen.jsonl")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["n"] == 5 and 0 <= result["accuracy"] <= 1 and 0 <= result["bleu"] <= 100
    folded = tmp_path / "f.ckpt"
    assert main(["fold", str(workspace / "m.ckpt"), str(folded)]) == 0
    model, header = checkpoint.load(folded)
    assert model.bank.folded and model.bank.expanders == []
    assert main(["evaluate", str(folded), str(workspace / "seen.jsonl")]) == 0
    assert json.loads(capsys.readouterr().out) == result


def test_evaluate_reports_length_compliance(tmp_path, capsys):
    data = gen_length_task(0, 30)
    write_jsonl(data, tmp_path / "len.jsonl")
    (tmp_path / "len.cfg").write_text(CONFIG.replace("category = *", "len_ratio = ratio")
                                      .replace("special_tokens = <H>", ""))
    ckpt = tmp_path / "len.ckpt"
    assert main(["train", str(tmp_path / "len.cfg"), str(tmp_path / "len.jsonl"), str(ckpt)]) == 0
    capsys.readouterr()
    assert main(["evaluate", str(ckpt), str(tmp_path / "len.jsonl")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert 0 <= result["len_ratio_compliance"] <= 1 and result["len_ratio_per_target"]


def test_sweep_writes_normalised_csv(workspace, tmp_path):
    out = tmp_path / "sweep.csv"
    cfg = tmp_path / "bleu.cfg"
    cfg.write_text(CONFIG.replace("eval_every = 3", "eval_every = 3\ncheckpoint_metric = bleu"))
    assert main(["sweep", str(cfg), str(workspace / "train.jsonl"), "--rho", "1,2,4", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [int(r["rho"]) for r in rows] == [1, 2, 4]
    assert max(float(r["pct_of_max"]) for r in rows) == pytest.approx(100.0)
    pcts = [float(r["params_pct"]) for r in rows]
    assert pcts == sorted(pcts) and len(set(pcts)) == 3


def test_sweep_bad_rho_list(workspace, tmp_path):
    assert main(["sweep", str(workspace / "run.cfg"), str(workspace / "train.jsonl"), "--rho", "1,x",
                 "--out", str(tmp_path / "s.csv")]) == 1


def test_inspect_exports(workspace, tmp_path, capsys):
    assert main(["inspect", str(workspace / "m.ckpt"), "category", "Dc", str(tmp_path), "--svg"]) == 0
    rows = list(csv.reader((tmp_path / "category_Dc_pca.csv").open()))
    assert rows[0] == ["label", "x", "y"] and [r[0] for r in rows[1:]] == ["Airport", "SportsTeam"]
    assert (tmp_path / "category_Dc_pca.svg").read_text().count("<circle") == 2
    assert main(["inspect", str(workspace / "m.ckpt"), "colour", "Dc", str(tmp_path)]) == 1


def test_zero_shot_map_command(workspace, capsys):
    assert main(["zero-shot-map", str(workspace / "m.ckpt"), "category", "Athlete", "Airline"]) == 0
    assert capsys.readouterr().out.splitlines() == ["Athlete\tSportsTeam", "Airline\tAirport"]
    assert main(["zero-shot-map", str(workspace / "m.ckpt"), "colour", "x"]) == 1


def test_length_cue_pretraining(workspace, tmp_path):
    write_jsonl(gen_length_task(0, 30), tmp_path / "len.jsonl")
    text = CONFIG.replace("category = *", "len_ratio = ratio").replace("special_tokens = <H>", "")
    (tmp_path / "cue.cfg").write_text(text + "[pretrain]\ntotal_steps = 3\nwarmup_steps = 0\nlength_cues = 0.5\n")
    ckpt = tmp_path / "cue.ckpt"
    assert main(["train", str(tmp_path / "cue.cfg"), str(tmp_path / "len.jsonl"), str(ckpt)]) == 0
    model, _ = checkpoint.load(ckpt)
    assert "<len15>" in model.vocab
    (tmp_path / "bad.cfg").write_text(CONFIG + "[pretrain]\ntotal_steps = 3\nwarmup_steps = 0\nlength_cues = 0.5\n")
    # d2t data has no ratio attribute to derive cues from
    assert main(["train", str(tmp_path / "bad.cfg"), str(workspace / "train.jsonl"), str(ckpt)]) == 1
