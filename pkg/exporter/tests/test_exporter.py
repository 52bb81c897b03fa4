"""Library-level exporter tests: dump layout, ingest round trips, gradients."""

import json
import subprocess
import sys

import numpy as np
import pytest
import torch
from torch import nn

from adabet.ingest import (
    load_layer_batches,
    read_meta_file,
    read_npy,
    validate_dump_dir,
)
from adabet_exporter import ExportError, ExportPlan, export
from adabet_exporter.models import build_attention
from expfixtures import (
    SmallConv,
    conv_reference_activations,
    float_batches,
    mlp,
    small_conv,
)


def run_tool(*argv):
    return subprocess.run(["adabet", *argv], capture_output=True, text=True)


def export_conv(tmp_path, with_grads=False, seed=0, n_batches=5, batch_size=8):
    model = small_conv(seed)
    batches = float_batches((1, 6, 6), n_batches, batch_size, seed + 1,
                            classes=4 if with_grads else None)
    plan = ExportPlan(model=model, batches=batches, n_batches=n_batches,
                      batch_size=batch_size, dump_grads=with_grads)
    out = export(plan, tmp_path / "dump")
    return out, model, batches


class TestAcceptance:
    def test_conv_round_trip_feeds_the_toolkit_cleanly(self, tmp_path):
        out, model, batches = export_conv(tmp_path)
        metas = read_meta_file(out)
        warnings = validate_dump_dir(out, metas)
        assert warnings == []
        assert [m.index for m in metas] == [0, 1, 2]
        assert all(m.trainable for m in metas)

        # every re-read activation file is bit-for-bit the forward recomputation
        checked = 0
        for b, x in enumerate(batches):
            expected = conv_reference_activations(model, x)
            for i, exp in enumerate(expected):
                t = read_npy((out / ("layer%04d_batch%04d.npy" % (i, b))).read_bytes())
                assert t.dtype == "f32"
                assert t.shape == tuple(exp.shape)
                assert t.data.tobytes() == exp.numpy().ravel().tobytes()
                checked += 1
        assert checked == 15

        result = run_tool("rank", "--dumps", str(out), "--rho", "0.5",
                          "--out", str(tmp_path / "manifest.json"))
        assert result.returncode == 0, result.stderr
        assert result.stderr == ""

        rules = ((r"(?:^|\.)(?:q|k|v|out)_proj$", "attn"),)
        model, shape, classes, _ = build_attention()
        plan = ExportPlan(model=model,
                          batches=float_batches(shape, 5, 8, seed=3),
                          group_rules=rules)
        attn_out = export(plan, tmp_path / "attn_dump")
        attn_metas = read_meta_file(attn_out)
        grouped = [m for m in attn_metas if m.group_id == "attn"]
        assert [m.index for m in grouped] == [0, 1, 2, 3]
        assert validate_dump_dir(attn_out, attn_metas) == []
        print("PASS: conv dumps ingest cleanly, re-read bit-exact in f32, "
              "attention metas share a group id")


class TestDumpLayout:
    def test_mlp_five_batches_writes_fifteen_files(self, tmp_path):
        model = mlp(seed=1)
        plan = ExportPlan(model=model,
                          batches=float_batches((10,), 5, 8, seed=2))
        out = export(plan, tmp_path / "d")
        acts = sorted(p.name for p in out.glob("*.npy"))
        assert len(acts) == 15
        assert not [n for n in acts if n.endswith(".grad.npy")]
        rows = json.loads((out / "meta.json").read_text())
        assert len(rows) == 3
        assert [r["index"] for r in rows] == [0, 1, 2]
        assert acts[0] == "layer0000_batch0000.npy"
        assert acts[-1] == "layer0002_batch0004.npy"

    def test_meta_names_counts_and_widths(self, tmp_path):
        out, model, _ = export_conv(tmp_path)
        rows = json.loads((out / "meta.json").read_text())
        assert [r["name"] for r in rows] == ["conv1", "conv2", "head"]
        assert [r["act_elems_per_sample"] for r in rows] == [108, 54, 4]
        p = lambda m: sum(q.numel() for q in m.parameters())
        assert [r["param_count"] for r in rows] == [
            p(model.conv1), p(model.conv2), p(model.head)]
        assert all(r["group_id"] is None for r in rows)
        assert all(r["trainable"] is True for r in rows)

    def test_parameter_free_modules_never_listed(self, tmp_path):
        out, _, _ = export_conv(tmp_path)
        names = {r["name"] for r in json.loads((out / "meta.json").read_text())}
        assert names.isdisjoint({"act1", "act2", "pool"})

    def test_post_activation_values_captured(self, tmp_path):
        out, model, batches = export_conv(tmp_path)
        x = batches[0]
        with torch.no_grad():
            raw = model.conv1(x)
        assert float(raw.min()) < 0.0  # relu must actually change something
        t = read_npy((out / "layer0000_batch0000.npy").read_bytes())
        assert t.data.min() >= 0.0
        assert t.data.tobytes() == torch.relu(raw).numpy().ravel().tobytes()

    def test_row_major_flattening_matches_ingest(self, tmp_path):
        out, model, batches = export_conv(tmp_path)
        metas = read_meta_file(out)
        matrix, _ = load_layer_batches(out, metas[0])
        expected = np.concatenate(
            [conv_reference_activations(model, x)[0].numpy()
                 .astype(np.float64).reshape(8, -1)
             for x in batches])
        assert matrix.shape == (40, 108)
        assert np.array_equal(matrix, expected)

    def test_export_is_deterministic(self, tmp_path):
        model = small_conv(seed=5)
        batches = float_batches((1, 6, 6), 5, 8, seed=6)
        a = export(ExportPlan(model=model, batches=batches), tmp_path / "a")
        b = export(ExportPlan(model=model, batches=batches), tmp_path / "b")
        names_a = sorted(p.name for p in a.iterdir())
        assert names_a == sorted(p.name for p in b.iterdir())
        for name in names_a:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


class TestGradients:
    def test_companion_files_written_and_consumable(self, tmp_path):
        out, _, _ = export_conv(tmp_path, with_grads=True)
        acts = {p.name for p in out.glob("*.npy") if not p.name.endswith(".grad.npy")}
        grads = {p.name for p in out.glob("*.grad.npy")}
        assert grads == {n[:-4] + ".grad.npy" for n in acts}
        metas = read_meta_file(out)
        assert validate_dump_dir(out, metas) == []
        act, grad = load_layer_batches(out, metas[1], with_grads=True)
        assert act.shape == grad.shape == (40, 54)
        result = run_tool("fisher-rank", "--dumps", str(out), "--rho", "0.5",
                          "--out", str(tmp_path / "manifest.json"))
        assert result.returncode == 0, result.stderr
        assert result.stderr == ""

    def test_logit_gradients_match_softmax_minus_onehot(self, tmp_path):
        out, model, batches = export_conv(tmp_path, with_grads=True)
        for b, (x, y) in enumerate(batches):
            logits = conv_reference_activations(model, x)[2].double()
            soft = torch.softmax(logits, dim=1)
            soft[torch.arange(8), y] -= 1.0
            expected = (soft / 8.0).numpy()
            got = read_npy(
                (out / ("layer%04d_batch%04d.grad.npy" % (2, b))).read_bytes())
            assert got.shape == (8, 4)
            np.testing.assert_allclose(
                got.data.reshape(8, 4), expected, atol=1e-6)

    def test_unlabeled_batches_rejected(self, tmp_path):
        plan = ExportPlan(model=small_conv(), dump_grads=True,
                          batches=float_batches((1, 6, 6), 5, 8, seed=0))
        with pytest.raises(ExportError, match="no labels"):
            export(plan, tmp_path / "d")

    def test_out_of_range_labels_rejected(self, tmp_path):
        batches = [(x, y + 100) for x, y in
                   float_batches((1, 6, 6), 5, 8, seed=0, classes=4)]
        plan = ExportPlan(model=small_conv(), dump_grads=True, batches=batches)
        with pytest.raises(ExportError, match="outside the model's 4 classes"):
            export(plan, tmp_path / "d")

    def test_parameter_grads_left_clean(self, tmp_path):
        out, model, _ = export_conv(tmp_path, with_grads=True)
        assert all(p.grad is None for p in model.parameters())


class TestFrozenLayers:
    def test_frozen_layer_listed_but_not_dumped(self, tmp_path):
        model = small_conv(seed=2)
        for p in model.conv2.parameters():
            p.requires_grad_(False)
        plan = ExportPlan(model=model,
                          batches=float_batches((1, 6, 6), 5, 8, seed=3))
        out = export(plan, tmp_path / "d")
        rows = json.loads((out / "meta.json").read_text())
        assert [r["trainable"] for r in rows] == [True, False, True]
        assert not list(out.glob("layer0001_*.npy"))
        assert len(list(out.glob("layer0000_*.npy"))) == 5
        metas = read_meta_file(out)
        assert validate_dump_dir(out, metas) == []
        result = run_tool("rank", "--dumps", str(out), "--rho", "1.0",
                          "--out", str(tmp_path / "m.json"))
        assert result.returncode == 0, result.stderr
        manifest = json.loads((tmp_path / "m.json").read_text())
        assert manifest["selected"] == [0, 2]

    def test_fully_frozen_model_rejected(self, tmp_path):
        model = mlp(seed=0)
        for p in model.parameters():
            p.requires_grad_(False)
        plan = ExportPlan(model=model, batches=float_batches((10,), 5, 8, seed=0))
        with pytest.raises(ExportError, match="no trainable layers"):
            export(plan, tmp_path / "d")

    def test_parameterless_model_rejected(self, tmp_path):
        plan = ExportPlan(model=nn.Sequential(nn.ReLU(), nn.Tanh()),
                          batches=float_batches((10,), 5, 8, seed=0))
        with pytest.raises(ExportError, match="no parameterized layers"):
            export(plan, tmp_path / "d")


class TestGrouping:
    def test_attention_block_shares_one_group_id(self, tmp_path):
        model, shape, _classes, rules = build_attention()
        plan = ExportPlan(model=model, batches=float_batches(shape, 5, 8, seed=1),
                          group_rules=rules)
        out = export(plan, tmp_path / "d")
        rows = json.loads((out / "meta.json").read_text())
        assert [r["name"] for r in rows] == [
            "q_proj", "k_proj", "v_proj", "out_proj", "head"]
        assert [r["group_id"] for r in rows] == ["attn"] * 4 + [None]
        # the group's highest-index member is the block output projection
        grouped = [r for r in rows if r["group_id"] == "attn"]
        assert max(grouped, key=lambda r: r["index"])["name"] == "out_proj"

        result = run_tool("rank", "--dumps", str(out), "--rho", "0.5",
                          "--out", str(tmp_path / "m.json"))
        assert result.returncode == 0, result.stderr
        manifest = json.loads((tmp_path / "m.json").read_text())
        attn_rows = [r for r in manifest["scores"] if r["group"] == "attn"]
        assert len(attn_rows) == 1 and attn_rows[0]["layer"] == 3

    def test_first_matching_rule_wins(self, tmp_path):
        plan = ExportPlan(model=small_conv(),
                          batches=float_batches((1, 6, 6), 2, 8, seed=0),
                          n_batches=2,
                          group_rules=(("conv", "g1"), ("conv2", "g2")))
        out = export(plan, tmp_path / "d")
        rows = json.loads((out / "meta.json").read_text())
        assert [r["group_id"] for r in rows] == ["g1", "g1", None]

    def test_bad_rule_pattern_rejected(self, tmp_path):
        plan = ExportPlan(model=small_conv(),
                          batches=float_batches((1, 6, 6), 5, 8, seed=0),
                          group_rules=(("(", "oops"),))
        with pytest.raises(ExportError, match="bad pattern"):
            export(plan, tmp_path / "d")

    def test_empty_group_id_rejected(self, tmp_path):
        plan = ExportPlan(model=small_conv(),
                          batches=float_batches((1, 6, 6), 5, 8, seed=0),
                          group_rules=(("conv", ""),))
        with pytest.raises(ExportError, match="non-empty string"):
            export(plan, tmp_path / "d")


class TestPlanValidation:
    def test_wrong_batch_size_rejected(self, tmp_path):
        plan = ExportPlan(model=small_conv(),
                          batches=float_batches((1, 6, 6), 5, 7, seed=0))
        with pytest.raises(ExportError, match="batch_size 8"):
            export(plan, tmp_path / "d")

    def test_source_running_dry_rejected(self, tmp_path):
        plan = ExportPlan(model=small_conv(),
                          batches=float_batches((1, 6, 6), 3, 8, seed=0))
        with pytest.raises(ExportError, match="ran dry after 3 of 5"):
            export(plan, tmp_path / "d")

    def test_activation_shape_drift_rejected(self, tmp_path):
        torch.manual_seed(0)
        model = nn.Sequential(nn.Conv2d(1, 3, 3, padding=1), nn.ReLU())
        gen = torch.Generator().manual_seed(0)
        batches = [torch.randn((8, 1, 6, 6), generator=gen),
                   torch.randn((8, 1, 8, 8), generator=gen)]
        plan = ExportPlan(model=model, batches=batches, n_batches=2)
        with pytest.raises(ExportError, match="drifted"):
            export(plan, tmp_path / "d")

    def test_nonempty_directory_refused(self, tmp_path):
        target = tmp_path / "d"
        target.mkdir()
        (target / "stale.npy").write_bytes(b"junk")
        plan = ExportPlan(model=small_conv(),
                          batches=float_batches((1, 6, 6), 5, 8, seed=0))
        with pytest.raises(ExportError, match="non-empty"):
            export(plan, target)

    def test_bad_counts_rejected(self, tmp_path):
        batches = float_batches((1, 6, 6), 5, 8, seed=0)
        with pytest.raises(ExportError, match="n_batches"):
            export(ExportPlan(model=small_conv(), batches=batches, n_batches=0),
                   tmp_path / "a")
        with pytest.raises(ExportError, match="batch_size"):
            export(ExportPlan(model=small_conv(), batches=batches, batch_size=0),
                   tmp_path / "b")

    def test_shared_module_call_rejected(self, tmp_path):
        class Reuser(nn.Module):
            def __init__(self):
                super().__init__()
                self.lin = nn.Linear(6, 6)

            def forward(self, x):
                return self.lin(self.lin(x))

        torch.manual_seed(0)
        plan = ExportPlan(model=Reuser(),
                          batches=float_batches((6,), 5, 8, seed=0))
        with pytest.raises(ExportError, match="more than once"):
            export(plan, tmp_path / "d")


class TestModelStateHandling:
    def test_training_mode_saved_and_restored(self, tmp_path):
        torch.manual_seed(0)
        model = nn.Sequential(nn.Linear(6, 8), nn.ReLU(), nn.Dropout(0.5),
                              nn.Linear(8, 3))
        model.train()
        batches = float_batches((6,), 5, 8, seed=1)
        out_a = export(ExportPlan(model=model, batches=batches), tmp_path / "a")
        assert model.training and all(m.training for m in model.modules())

        model.eval()
        out_b = export(ExportPlan(model=model, batches=batches), tmp_path / "b")
        for name in sorted(p.name for p in out_a.iterdir()):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_float64_models_export_as_f8(self, tmp_path):
        model = mlp(seed=3).double()
        batches = [x.double() for x in float_batches((10,), 5, 8, seed=4)]
        out = export(ExportPlan(model=model, batches=batches), tmp_path / "d")
        t = read_npy((out / "layer0000_batch0000.npy").read_bytes())
        assert t.dtype == "f64"
        assert validate_dump_dir(out, read_meta_file(out)) == []

    def test_half_precision_rejected(self, tmp_path):
        model = mlp(seed=3).half()
        batches = [x.half() for x in float_batches((10,), 5, 8, seed=4)]
        plan = ExportPlan(model=model, batches=batches)
        with pytest.raises(ExportError, match="float16"):
            export(plan, tmp_path / "d")
