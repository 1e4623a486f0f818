import unittest

from tuberepair.maybe import Just, Maybe, Nothing


class TestUndefinedValues(unittest.TestCase):

    def test_nothing_is_not_zero(self):
        self.assertNotEqual(Just(0.0), Nothing())
        self.assertFalse(Nothing().is_just())
        self.assertTrue(Just(0.0).is_just())

    def test_equality_by_content(self):
        self.assertEqual(Just(0.5), Just(0.5))
        self.assertEqual(Nothing(), Nothing())
        self.assertNotEqual(Just(0.5), Just(0.25))
        self.assertEqual("Just(0.5)", repr(Just(0.5)))

    def test_unwrap(self):
        self.assertEqual(0.25, Just(0.25).unwrap())
        with self.assertRaises(ValueError):
            Nothing().unwrap()

    def test_to_optional(self):
        self.assertIsNone(Nothing().to_optional())
        self.assertEqual(1.0, Just(1.0).to_optional())
        self.assertEqual(0.0, Just(0.0).to_optional())
        self.assertIsInstance(Nothing(), Maybe)


if __name__ == '__main__':
    unittest.main()
