import json

import pytest

from enhseg import dataio
from enhseg.cli import EXIT_CONFIG, EXIT_DATA, build_parser, main
from enhseg.core import ClassVocabulary


def _tiny_overrides(desc, out_dir, pseudo_dir, mode="semi", iters=2):
    return [f"data.root={desc.root}", "data.fraction=1/4", f"data.pseudo_dir={pseudo_dir}",
            "perturb.crop_size=32", "optim.lr0=0.01", f"train.mode={mode}", "train.labeled_batch=2",
            "train.unlabeled_batch=2", f"train.max_iters={iters}", f"train.eval_every={iters}",
            f"train.checkpoint_every={iters}", "train.model_width=4", f"train.out_dir={out_dir}"]


def test_make_splits_reports_pascal_sized_counts(tmp_path, capsys):
    desc = dataio.synthetic_dataset(tmp_path, seed=0, n_images=1464, n_classes=2, size=4, n_val=1)
    assert main(["make-splits", f"data.root={desc.root}", "--fractions", "1/16,1/8"]) == 0
    out = capsys.readouterr().out
    assert "92 labeled" in out and "183 labeled" in out
    assert len(dataio.read_ids(tmp_path / "splits" / "1-16" / "seed0" / "labeled.txt")) == 92


def test_bad_dataset_path_is_a_data_error(tmp_path, capsys):
    bad = tmp_path / "no" / "such" / "dir"
    assert main(["make-splits", f"data.root={bad}"]) == EXIT_DATA
    assert str(bad) in capsys.readouterr().err


def test_bad_config_exits_with_config_code(capsys):
    assert main(["make-splits", "train.nonsense=1"]) == EXIT_CONFIG
    assert "train.nonsense" in capsys.readouterr().err
    assert main(["make-splits"]) == EXIT_CONFIG


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    out = capsys.readouterr().out
    assert "train.tau" in out and "providers.sim_threshold" in out and "--resume" in out


def test_annotate_train_eval_report(small_synthetic, tmp_path, capsys):
    pseudo = tmp_path / "pseudo"
    run = tmp_path / "run"
    ov = _tiny_overrides(small_synthetic, run, pseudo)
    assert main(["train", *ov]) == EXIT_DATA  # no pseudo-labels yet
    assert main(["annotate", *ov, "--workers", "2"]) == 0
    assert (pseudo / "manifest.json").is_file()
    assert "pixel coverage" in capsys.readouterr().out
    assert main(["train", *ov]) == 0
    assert main(["eval", *ov, "--checkpoint", str(run / "last.pt"), "--out", str(tmp_path / "rep.json"),
                 "--dump-dir", str(tmp_path / "pred")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert 0 <= rep["miou"] <= 1 and rep["n_images"] == len(small_synthetic.val_ids())
    assert len(list((tmp_path / "pred").glob("*.png"))) == rep["n_images"]
    capsys.readouterr()
    assert main(["report", *ov]) == 0
    assert str(run) in capsys.readouterr().out


def test_train_with_annotate_first_and_resume(small_synthetic, tmp_path):
    run = tmp_path / "run"
    ov = _tiny_overrides(small_synthetic, run, tmp_path / "pseudo")
    assert main(["train", *ov, "--annotate-first"]) == 0
    ov2 = [o for o in ov if not o.startswith("train.max_iters")] + ["train.max_iters=3"]
    assert main(["train", *ov2, "--resume"]) == 0
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(ln)["iter"] for ln in lines] == [0, 1, 2]


def test_eval_rejects_vocabulary_mismatch(small_synthetic, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", *_tiny_overrides(small_synthetic, run, tmp_path / "p", mode="supervised")]) == 0
    other = dataio.synthetic_dataset(tmp_path / "other", seed=0, n_images=2, n_classes=4, size=16, n_val=1)
    assert other.vocabulary != ClassVocabulary(small_synthetic.vocabulary.names)
    assert main(["eval", f"data.root={other.root}", "--checkpoint", str(run / "last.pt")]) == EXIT_DATA
    assert "vocabulary" in capsys.readouterr().err


def test_mock_providers_need_a_palette(tmp_path):
    dataio.pascal_voc_descriptor(tmp_path)
    (tmp_path / "ImageSets" / "Segmentation").mkdir(parents=True)
    (tmp_path / "ImageSets" / "Segmentation" / "train.txt").write_text("")
    assert main(["annotate", f"data.root={tmp_path}", "data.fraction=full", "--all"]) == EXIT_CONFIG
