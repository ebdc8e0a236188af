import tempfile
import unittest
from dataclasses import replace
from pathlib import Path
from unittest.mock import patch

import numpy as np

from config import RunConfig
from dataset import gen_synthetic_clusters, save_dataset, synthetic_meta
from errors import ConfigError, DataError, NumericError
from fnr_model import LossBreakdown, loss_and_grads
from trainer import (
    prepare_data, train_model, run_training, evaluate_checkpoint, read_history, run_gradcheck, worst_by_group,
)


class TrainerTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.records = gen_synthetic_clusters(200, 4, seed=1, separation=4.0)
        self.config = RunConfig(k=4, hidden=4, batch_size=32, max_epochs=3, output_dir=str(self.dir / "run"))

    def tearDown(self):
        self.tmp.cleanup()


class TestTrainModel(TrainerTestCase):

    def test_constant_validation_loss_trace(self):
        train, val, _, balance = prepare_data(self.config, self.records)
        flat = LossBreakdown(l_T=0.0, l_I=0.0, l_s=0.0, l_c=1.0, total=1.0, alpha=1.0, lam=1.0)
        with patch("trainer.forward_loss", return_value=(flat, None)):
            result = train_model(train, val, replace(self.config, max_epochs=100), balance)
        self.assertTrue(result.stopped_early)
        self.assertEqual(len(result.history), 11)
        factors = [r.lr_factor for r in result.history]
        self.assertEqual(factors[4], 1.0)
        self.assertEqual(factors[5], 0.5)
        self.assertEqual(factors[9], 0.5)
        self.assertEqual(factors[10], 0.25)
        self.assertEqual(result.best_epoch, 1)

    def test_best_snapshot_has_minimum_validation_loss(self):
        train, val, _, balance = prepare_data(self.config, self.records)
        result = train_model(train, val, replace(self.config, max_epochs=6), balance)
        val_losses = [r.val_total for r in result.history]
        self.assertEqual(result.best_val_loss, min(val_losses))
        self.assertEqual(result.best_epoch, val_losses.index(min(val_losses)) + 1)

    def test_lambda_zero_matches_classification_only_training(self):
        train, val, _, balance = prepare_data(self.config, self.records)
        fused = train_model(train, val, replace(self.config, mode="fused_s", lam=0.0), balance)
        plain = train_model(train, val, replace(self.config, mode="fused_ws", lam=0.0), balance)
        for name, value in plain.last_params.as_dict().items():
            np.testing.assert_array_equal(fused.last_params.as_dict()[name], value, err_msg=name)
        self.assertEqual([r.total for r in fused.history], [r.total for r in plain.history])

    def test_non_finite_loss_reports_epoch_and_step(self):
        train, val, _, balance = prepare_data(self.config, self.records)
        with patch("trainer.loss_and_grads", side_effect=NumericError("Non-finite output from 'matmul'")):
            with self.assertRaises(NumericError) as ctx:
                train_model(train, val, self.config, balance)
        self.assertIn("epoch 1 step 1", str(ctx.exception))

    def test_non_finite_validation_reports_epoch(self):
        train, val, _, balance = prepare_data(self.config, self.records)
        with patch("trainer.forward_loss", side_effect=NumericError("Non-finite output from 'softmax_rows'")):
            with self.assertRaises(NumericError) as ctx:
                train_model(train, val, self.config, balance)
        self.assertIn("epoch 1 validation", str(ctx.exception))
        self.assertIn("softmax_rows", str(ctx.exception))

    def test_epoch_sees_every_train_record_once_with_singleton_remainder(self):
        train, val, _, balance = prepare_data(self.config, self.records)
        b = next(size for size in range(8, len(train)) if len(train) % size == 1)
        seen = []

        def recording(batch, *args, **kwargs):
            seen.append(list(batch.ids))
            return loss_and_grads(batch, *args, **kwargs)

        with patch("trainer.loss_and_grads", side_effect=recording):
            train_model(train, val, replace(self.config, batch_size=b, max_epochs=1), balance)
        self.assertEqual(len(seen), len(train) // b)
        self.assertEqual(len(seen[-1]), b + 1)
        self.assertEqual(sorted(sum(seen, [])), sorted(r.id for r in train))

    def test_alpha_uses_full_train_split(self):
        _, _, test, balance = prepare_data(self.config, self.records)
        train_labels = [r.label for r in self.records if r.split == "train"]
        n_fake, n_real = sum(train_labels), len(train_labels) - sum(train_labels)
        self.assertAlmostEqual(balance.alpha, max(n_fake, n_real) / min(n_fake, n_real))
        self.assertEqual(len(test), sum(r.split == "test" for r in self.records))


class TestRunDirectory(TrainerTestCase):

    def test_run_directory_contents(self):
        run_dir, report, result = run_training(self.config, records=self.records)
        for name in ("config.resolved.env", "history.jsonl", "best.fnrc", "last.fnrc", "report.txt", "report.json", "roc.csv"):
            self.assertTrue((run_dir / name).is_file(), name)
        self.assertEqual(len(read_history(run_dir / "history.jsonl", 100)), len(result.history))
        self.assertGreaterEqual(report.accuracy, 0.0)

    def test_repeated_runs_are_byte_identical(self):
        a, _, _ = run_training(replace(self.config, output_dir=str(self.dir / "a")), records=self.records)
        b, _, _ = run_training(replace(self.config, output_dir=str(self.dir / "b")), records=self.records)
        for name in ("report.json", "report.txt", "history.jsonl", "roc.csv"):
            self.assertEqual((a / name).read_bytes(), (b / name).read_bytes(), name)

    def test_resume_continues_the_same_trajectory(self):
        full = replace(self.config, max_epochs=4, output_dir=str(self.dir / "full"))
        full_dir, _, _ = run_training(full, records=self.records)

        part = replace(self.config, max_epochs=2, output_dir=str(self.dir / "part"))
        part_dir, _, _ = run_training(part, records=self.records)
        resumed_dir, _, result = run_training(replace(part, max_epochs=4), records=self.records, resume=part_dir / "last.fnrc")

        self.assertEqual(len(result.history), 4)
        self.assertEqual((full_dir / "history.jsonl").read_bytes(), (resumed_dir / "history.jsonl").read_bytes())
        self.assertEqual((full_dir / "report.json").read_bytes(), (resumed_dir / "report.json").read_bytes())

    def test_evaluate_checkpoint_reproduces_final_report(self):
        manifest = save_dataset(self.records, synthetic_meta("clusters", self.records), self.dir / "data" / "clusters.json")
        run_dir, report, _ = run_training(replace(self.config, dataset=str(manifest)))
        again = evaluate_checkpoint(run_dir / "best.fnrc", manifest)
        self.assertEqual(again.to_dict(), report.to_dict())

    def test_evaluate_checkpoint_dimension_mismatch(self):
        run_dir, _, _ = run_training(self.config, records=self.records)
        other = gen_synthetic_clusters(40, 6, seed=2, separation=4.0)
        manifest = save_dataset(other, synthetic_meta("wide", other), self.dir / "wide.json")
        with self.assertRaises(DataError) as ctx:
            evaluate_checkpoint(run_dir / "best.fnrc", manifest)
        self.assertIn("6", str(ctx.exception))
        self.assertIn("4", str(ctx.exception))

    def test_missing_dataset_setting(self):
        with self.assertRaises(ConfigError):
            run_training(self.config)


class TestGradcheckRunner(unittest.TestCase):

    def test_group_summary(self):
        groups = worst_by_group(run_gradcheck())
        self.assertEqual(set(groups), {"text_projector", "image_projector", "classifier"})
        self.assertTrue(all(err < 1e-5 for err in groups.values()))

    def test_unknown_fault_target(self):
        with self.assertRaises(ConfigError):
            run_gradcheck(inject_fault="classifier.w9")


if __name__ == '__main__':
    unittest.main()
