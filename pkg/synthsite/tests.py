import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from PIL import Image

from numcore.errors import DatasetError, PdsmError
from numcore.storage import read_tensor, tree_digest

from .generator import (
    draw_patient, draw_sites, fat_mask, generate_cohort, render_image, split_train_test, tissue_field,
)
from .models import CohortConfig, CohortManifest, SiteProfile, VisitRecord, read_manifest, write_manifest

TINY = CohortConfig(patients=6, sites=3, vendors=2, image_size=16)


def stub_manifest(patients=74):
    records = []
    for index in range(patients):
        pid = f'P{index:04d}'
        for week in (0, 12, 48):
            records.append(VisitRecord(pid, 'S000', week, f'images/{pid}_{week}.tns', None if week == 12 else 1.0))
    return CohortManifest(records=records, config_hash='x', seed=0)


class RenderTests(SimpleTestCase):

    def test_zero_steatosis_neutral_site_is_tissue(self):
        image = render_image(0.0, SiteProfile.neutral('S000'), seed=3)
        tissue = tissue_field(3).astype(np.float32)
        self.assertEqual(image.shape, (6, 64, 64))
        for channel in image.values:
            np.testing.assert_array_equal(channel, tissue)

    def test_coverage_grows_with_latent(self):
        means = [np.mean([fat_mask(latent, seed).mean() for seed in range(50)]) for latent in (0.5, 1.5, 2.5, 3.5)]
        self.assertTrue(all(a <= b for a, b in zip(means, means[1:])))
        self.assertAlmostEqual(means[-1], 3.5 / 4 * 0.3, delta=1e-3)

    def test_first_echo_brighter_than_second(self):
        site = SiteProfile.neutral('S000')
        channel_means = [render_image(2.0, site, seed).values[:2].mean(axis=(1, 2)) for seed in range(10)]
        first, second = np.mean(channel_means, axis=0)
        self.assertGreaterEqual(first, second)

    def test_latent_out_of_range(self):
        with self.assertRaises(PdsmError):
            render_image(4.5, SiteProfile.neutral('S000'), seed=0)

    def test_zero_heterogeneity_sites_render_identically(self):
        sites = draw_sites(CohortConfig(sites=4, vendors=2, heterogeneity=0.0), seed=5)
        first = render_image(1.7, sites[0], seed=11, size=32)
        second = render_image(1.7, sites[3], seed=11, size=32)
        np.testing.assert_array_equal(first.values, second.values)

    def test_heterogeneity_spreads_site_means(self):
        spreads = []
        for amplitude in (0.0, 0.5, 1.0):
            config = CohortConfig(sites=6, vendors=3, heterogeneity=amplitude)
            per_seed = []
            for seed in range(10):
                means = [render_image(2.0, site, seed=100 + seed, size=32).values.mean()
                         for site in draw_sites(config, seed)]
                per_seed.append(np.var(means))
            spreads.append(np.mean(per_seed))
        self.assertLess(spreads[0], 1e-6)
        self.assertLess(spreads[0], spreads[1])
        self.assertLess(spreads[1], spreads[2])

    def test_site_profile_ranges(self):
        with self.assertRaises(PdsmError):
            SiteProfile('S000', gain=1.6)
        with self.assertRaises(PdsmError):
            SiteProfile('S000', gamma=0.5)
        with self.assertRaises(PdsmError):
            SiteProfile('S000', blur_sigma=-1.0)
        for site in draw_sites(CohortConfig(sites=20, vendors=5, heterogeneity=1.0), seed=1):
            self.assertTrue(0.5 <= site.gain <= 1.5 and 0.6 <= site.gamma <= 1.6)


class PatientTests(SimpleTestCase):

    def test_latents_and_labels(self):
        config = CohortConfig()
        sites = draw_sites(config, 0)
        patients = [draw_patient(i, sites, config, 0) for i in range(200)]
        for patient in patients:
            self.assertTrue(0.5 <= patient.s0 <= 3.5)
            self.assertTrue(min(patient.s0, patient.s48) <= patient.s12 <= max(patient.s0, patient.s48))
            self.assertIsNone(patient.label(12))
            self.assertEqual(patient.label(48), patient.s48)
        rate = np.mean([p.responder for p in patients])
        self.assertTrue(0.45 < rate < 0.75)

    def test_round_robin_over_sites(self):
        config = CohortConfig(sites=4)
        sites = draw_sites(config, 2)
        assigned = [draw_patient(i, sites, config, 2).site_id for i in range(8)]
        self.assertEqual(sorted(set(assigned)), sorted(s.site_id for s in sites))
        self.assertEqual(assigned[:4], assigned[4:])


class CohortTests(SimpleTestCase):

    def test_default_counts(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generate_cohort(CohortConfig(), seed=42, out_dir=tmp, threads=4)
            self.assertEqual(len(manifest.records), 222)
            self.assertEqual(sum(r.qsteatosis is not None for r in manifest.records), 148)
            self.assertEqual(len(manifest.patient_ids), 74)
            self.assertEqual(len({r.site_id for r in manifest.records}), 28)
            volume = read_tensor(manifest.image_path(manifest.records[0]))
            self.assertEqual(volume.shape, (6, 64, 64))

    def test_identical_trees_across_runs_and_threads(self):
        with tempfile.TemporaryDirectory() as tmp:
            generate_cohort(TINY, seed=7, out_dir=Path(tmp) / 'a', threads=1, previews=True)
            generate_cohort(TINY, seed=7, out_dir=Path(tmp) / 'b', threads=3, previews=True)
            self.assertEqual(tree_digest(Path(tmp) / 'a'), tree_digest(Path(tmp) / 'b'))
            generate_cohort(TINY, seed=8, out_dir=Path(tmp) / 'c')
            self.assertNotEqual(
                (Path(tmp) / 'a' / 'images' / 'P0000_w00.tns').read_bytes(),
                (Path(tmp) / 'c' / 'images' / 'P0000_w00.tns').read_bytes(),
            )

    def test_adding_patients_keeps_existing_ones(self):
        bigger = CohortConfig(patients=9, sites=3, vendors=2, image_size=16)
        with tempfile.TemporaryDirectory() as tmp:
            small = generate_cohort(TINY, seed=4, out_dir=Path(tmp) / 'small')
            large = generate_cohort(bigger, seed=4, out_dir=Path(tmp) / 'large')
            self.assertEqual(small.records, large.records[:len(small.records)])
            for record in small.records:
                self.assertEqual(small.image_path(record).read_bytes(), large.image_path(record).read_bytes())

    def test_manifest_roundtrip_and_header(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generate_cohort(TINY, seed=1, out_dir=tmp)
            loaded = read_manifest(Path(tmp) / 'manifest.jsonl')
            self.assertEqual(loaded.records, manifest.records)
            self.assertEqual(loaded.config_hash, TINY.digest())
            self.assertEqual(loaded.seed, 1)
            self.assertEqual(len(loaded.sites), 3)
            self.assertEqual(set(loaded.site_vendors().values()), {0, 1})

    def test_previews(self):
        with tempfile.TemporaryDirectory() as tmp:
            generate_cohort(TINY, seed=2, out_dir=tmp, previews=True)
            previews = sorted((Path(tmp) / 'previews').glob('*.png'))
            self.assertEqual(len(previews), 6)
            with Image.open(previews[0]) as image:
                self.assertEqual(image.size, (16, 16))

    def test_unwritable_output(self):
        with tempfile.NamedTemporaryFile() as handle:
            with self.assertRaises(OSError):
                generate_cohort(TINY, seed=0, out_dir=handle.name)

    def test_invalid_config(self):
        with self.assertRaises(PdsmError):
            CohortConfig(patients=1)

    def test_manifest_invariants(self):
        good = stub_manifest(2)
        with self.assertRaises(DatasetError):
            CohortManifest(records=good.records[:-1], config_hash='x', seed=0)
        bad = list(good.records)
        bad[1] = VisitRecord('P0000', 'S000', 12, 'images/x.tns', 2.0)
        with self.assertRaises(DatasetError) as ctx:
            CohortManifest(records=bad, config_hash='x', seed=0)
        self.assertEqual(ctx.exception.ids, ['P0000'])

    def test_write_then_read(self):
        manifest = stub_manifest(3)
        with tempfile.TemporaryDirectory() as tmp:
            write_manifest(manifest, Path(tmp) / 'm.jsonl')
            self.assertEqual(read_manifest(Path(tmp) / 'm.jsonl').records, manifest.records)


class SplitTests(SimpleTestCase):

    def test_default_cohort_sizes(self):
        train, test = split_train_test(stub_manifest(), 0.72, seed=3)
        self.assertEqual((len(train.patient_ids), len(test.patient_ids)), (53, 21))
        self.assertEqual(len(train.records), 159)
        self.assertFalse(set(train.patient_ids) & set(test.patient_ids))

    def test_seeded(self):
        manifest = stub_manifest()
        first, _ = split_train_test(manifest, seed=1)
        again, _ = split_train_test(manifest, seed=1)
        other, _ = split_train_test(manifest, seed=2)
        self.assertEqual(first.patient_ids, again.patient_ids)
        self.assertNotEqual(first.patient_ids, other.patient_ids)
        self.assertEqual(len(first.patient_ids), len(other.patient_ids))

    def test_bad_fraction(self):
        for fraction in (0.0, 1.0, 1.5):
            with self.assertRaises(PdsmError):
                split_train_test(stub_manifest(4), fraction)
