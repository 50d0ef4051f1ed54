import unittest

import numpy as np

from errors import InputError
from rng import derive_seed, make_rng


class TestStreams(unittest.TestCase):
    def test_same_path_same_draws(self):
        np.testing.assert_array_equal(
            make_rng(4, "vc-batch", 17).standard_normal(6), make_rng(4, "vc-batch", 17).standard_normal(6)
        )

    def test_paths_are_independent(self):
        base = make_rng(4, "vc-batch", 17).standard_normal(6)
        for other in (make_rng(5, "vc-batch", 17), make_rng(4, "vc-batch", 18), make_rng(4, "clap-epoch", 17)):
            self.assertFalse(np.array_equal(base, other.standard_normal(6)))

    def test_derive_seed(self):
        seed = derive_seed(0, "convert", 3)
        self.assertEqual(seed, derive_seed(0, "convert", 3))
        self.assertNotEqual(seed, derive_seed(0, "convert", 4))
        self.assertTrue(0 <= seed < 2**63)

    def test_negative_label(self):
        with self.assertRaises(InputError):
            make_rng(0, -1)


if __name__ == "__main__":
    unittest.main()
