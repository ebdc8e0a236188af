import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from dataset import (
    PRESETS, EmbeddingRecord, DatasetMeta, load_dataset, save_dataset, compute_alpha, split_validation,
    make_batches, gen_synthetic_xor, gen_synthetic_clusters, synthetic_meta, count_records,
)
from errors import ContractError, DataError
from fnr_model import REAL, FAKE


def make_records(n, d=4, seed=0, split="train"):
    rng = np.random.default_rng(seed)
    return [
        EmbeddingRecord(
            id=f"r{i}",
            split=split,
            label=i % 2,
            text_embedding=rng.standard_normal(d).astype(np.float32),
            image_embedding=rng.standard_normal(d).astype(np.float32),
        )
        for i in range(n)
    ]


class TestRecordFiles(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def assert_same_records(self, a, b):
        self.assertEqual(len(a), len(b))
        for x, y in zip(a, b):
            self.assertEqual((x.id, x.split, x.label), (y.id, y.split, y.label))
            np.testing.assert_array_equal(x.text_embedding, y.text_embedding)
            np.testing.assert_array_equal(x.image_embedding, y.image_embedding)

    def test_round_trip_both_formats(self):
        records = make_records(10)
        records[3].split = "test"
        meta = DatasetMeta(name="tiny", d_in=4, text_length="32 words", image_shape=(224, 224, 3))
        for fmt in ("jsonl", "binary"):
            path = save_dataset(records, meta, self.dir / f"tiny_{fmt}.json", fmt=fmt)
            loaded, loaded_meta = load_dataset(path)
            self.assert_same_records(records, loaded)
            self.assertEqual(loaded_meta.d_in, 4)
            self.assertEqual(loaded_meta.counts["test"], {"fake": 1, "real": 0})
            self.assertEqual(loaded_meta.image_shape, (224, 224, 3))

    def write_jsonl(self, lines, d_in=2):
        (self.dir / "data.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
        manifest = self.dir / "data.json"
        manifest.write_text(json.dumps({"name": "x", "d_in": d_in, "format": "jsonl", "records": "data.jsonl"}))
        return manifest

    def line(self, record_id="a", label=0, text=(0.1, 0.2), image=(0.3, 0.4), split="train"):
        return json.dumps({"id": record_id, "split": split, "label": label, "text_embedding": list(text), "image_embedding": image if image is None else list(image)})

    def test_nan_embedding_names_record(self):
        path = self.write_jsonl([self.line(), self.line("bad-one", text=(float("nan"), 0.0))])
        with self.assertRaises(DataError) as ctx:
            load_dataset(path)
        self.assertIn("bad-one", str(ctx.exception))

    def test_malformed_line_names_line_number(self):
        path = self.write_jsonl([self.line(), "{not json"])
        with self.assertRaises(DataError) as ctx:
            load_dataset(path)
        self.assertIn(":2:", str(ctx.exception))

    def test_missing_modality_rejected(self):
        path = self.write_jsonl([self.line(image=None)])
        with self.assertRaises(DataError) as ctx:
            load_dataset(path)
        self.assertIn("image", str(ctx.exception))

    def test_wrong_length_and_label(self):
        with self.assertRaises(DataError):
            load_dataset(self.write_jsonl([self.line(text=(0.1, 0.2, 0.3))]))
        with self.assertRaises(DataError):
            load_dataset(self.write_jsonl([self.line(label=3)]))

    def test_duplicate_ids(self):
        with self.assertRaises(DataError):
            load_dataset(self.write_jsonl([self.line("same"), self.line("same")]))

    def test_declared_counts_must_match(self):
        path = self.write_jsonl([self.line()])
        manifest = json.loads(path.read_text())
        manifest["counts"] = {"train": {"fake": 1, "real": 0}, "test": {"fake": 0, "real": 0}}
        path.write_text(json.dumps(manifest))
        with self.assertRaises(DataError):
            load_dataset(path)

    def test_binary_bad_magic(self):
        (self.dir / "data.bin").write_bytes(b"XXXX" + bytes(12))
        manifest = self.dir / "data.json"
        manifest.write_text(json.dumps({"name": "x", "d_in": 2, "format": "binary", "records": "data.bin"}))
        with self.assertRaises(DataError):
            load_dataset(manifest)

    def test_missing_manifest(self):
        with self.assertRaises(DataError):
            load_dataset(self.dir / "nope.json")


class TestAccounting(unittest.TestCase):

    def test_twitter_preset_totals(self):
        self.assertEqual(PRESETS["twitter"].total, 12237)
        self.assertEqual(PRESETS["twitter"].count("train", FAKE), 6649)

    def test_alpha_twitter_counts(self):
        balance = compute_alpha([FAKE] * 6649 + [REAL] * 4599)
        self.assertAlmostEqual(balance.alpha, 1.4458, delta=1e-4)
        self.assertEqual(balance.minority, REAL)

    def test_alpha_weibo_counts(self):
        balance = compute_alpha([FAKE] * 3748 + [REAL] * 3758)
        self.assertAlmostEqual(balance.alpha, 1.0027, delta=1e-4)
        self.assertEqual(balance.minority, FAKE)

    def test_alpha_balanced_and_symmetric(self):
        self.assertEqual(compute_alpha([0, 1, 0, 1]).alpha, 1.0)
        labels = np.array([1] * 30 + [0] * 12)
        self.assertEqual(compute_alpha(labels).alpha, compute_alpha(1 - labels).alpha)

    def test_alpha_needs_both_classes(self):
        with self.assertRaises(DataError):
            compute_alpha([1, 1, 1])

    def test_count_records(self):
        records = make_records(6)
        records[0].split = "test"
        self.assertEqual(count_records(records), {"train": {"fake": 3, "real": 2}, "test": {"fake": 0, "real": 1}})


class TestSplitsAndBatches(unittest.TestCase):

    def test_stratified_validation(self):
        records = make_records(100)
        train, val = split_validation(records, 0.1, seed=3)
        self.assertEqual(sum(r.label == FAKE for r in val), 5)
        self.assertEqual(sum(r.label == REAL for r in val), 5)
        self.assertEqual(sorted(r.id for r in train + val), sorted(r.id for r in records))
        self.assertEqual(len({r.id for r in train} & {r.id for r in val}), 0)

    def test_validation_split_is_seeded(self):
        records = make_records(40)
        self.assertEqual([r.id for r in split_validation(records, 0.2, 7)[1]], [r.id for r in split_validation(records, 0.2, 7)[1]])

    def test_validation_needs_two_per_class(self):
        records = make_records(3)
        with self.assertRaises(DataError):
            split_validation(records, 0.1, 0)
        with self.assertRaises(ContractError):
            split_validation(make_records(10), 0.5, 0)

    def test_batch_sizes(self):
        self.assertEqual([len(b) for b in make_batches(make_records(10), 4, shuffle=False)], [4, 4, 2])
        self.assertEqual([len(b) for b in make_batches(make_records(9), 4, shuffle=False)], [4, 5])

    def test_merged_singleton_keeps_every_record_once(self):
        for n in (5, 9, 13):
            records = make_records(n)
            for shuffle in (False, True):
                batches = make_batches(records, 4, seed=2, shuffle=shuffle)
                ids = sum((x.ids for x in batches), [])
                self.assertEqual(sorted(ids), sorted(r.id for r in records), (n, shuffle))
                self.assertEqual(len(batches[-1]), 5)
        unshuffled = make_batches(make_records(9), 4, shuffle=False)
        self.assertEqual(unshuffled[0].ids, ["r0", "r1", "r2", "r3"])
        self.assertEqual(unshuffled[1].ids, ["r4", "r5", "r6", "r7", "r8"])

    def test_unshuffled_order_and_tensors(self):
        records = make_records(6)
        batches = make_batches(records, 4, shuffle=False)
        self.assertEqual(sum((b.ids for b in batches), []), [r.id for r in records])
        self.assertEqual(batches[0].text.shape, (4, 4))
        np.testing.assert_array_equal(batches[1].labels, [0, 1])

    def test_shuffle_keeps_multiset_and_is_seeded(self):
        records = make_records(23)
        a = make_batches(records, 5, seed=[1, 2])
        b = make_batches(records, 5, seed=[1, 2])
        self.assertEqual([x.ids for x in a], [x.ids for x in b])
        self.assertEqual(sorted(sum((x.ids for x in a), [])), sorted(r.id for r in records))

    def test_batch_size_below_two(self):
        with self.assertRaises(ContractError):
            make_batches(make_records(4), 1)


class TestSyntheticData(unittest.TestCase):

    def test_xor_single_modality_is_uninformative(self):
        records = gen_synthetic_xor(10000, 8, seed=0)
        labels = np.array([r.label for r in records])
        self.assertAlmostEqual(labels.mean(), 0.5, delta=0.03)
        # sign of the text projection onto its direction, recovered with the label-free mean
        text = np.stack([r.text_embedding for r in records])
        u, _, _ = np.linalg.svd(text - text.mean(axis=0), full_matrices=False)
        s_t = np.sign(u[:, 0])
        self.assertLess(abs(np.corrcoef(s_t, labels)[0, 1]), 0.05)

    def test_xor_is_deterministic(self):
        a, b = gen_synthetic_xor(64, 4, seed=5), gen_synthetic_xor(64, 4, seed=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.text_embedding, y.text_embedding)
            self.assertEqual((x.split, x.label), (y.split, y.label))

    def test_xor_has_test_split(self):
        records = gen_synthetic_xor(1000, 4, seed=1)
        self.assertEqual(sum(r.split == "test" for r in records), 200)

    def test_xor_preconditions(self):
        with self.assertRaises(ContractError):
            gen_synthetic_xor(7, 4, 0)

    def nearest_centroid_accuracy(self, records):
        x = np.stack([np.concatenate([r.text_embedding, r.image_embedding]) for r in records])
        y = np.array([r.label for r in records])
        c0, c1 = x[y == 0].mean(axis=0), x[y == 1].mean(axis=0)
        pred = (np.linalg.norm(x - c1, axis=1) < np.linalg.norm(x - c0, axis=1)).astype(int)
        return (pred == y).mean()

    def test_clusters_separable(self):
        self.assertGreaterEqual(self.nearest_centroid_accuracy(gen_synthetic_clusters(2000, 16, 0, 6.0)), 0.99)

    def test_clusters_without_separation(self):
        self.assertAlmostEqual(self.nearest_centroid_accuracy(gen_synthetic_clusters(2000, 16, 0, 0.0)), 0.5, delta=0.1)

    def test_synthetic_meta(self):
        records = gen_synthetic_clusters(100, 6, 2, 3.0)
        meta = synthetic_meta("clusters", records)
        self.assertEqual(meta.d_in, 6)
        self.assertEqual(meta.total, 100)


if __name__ == '__main__':
    unittest.main()
