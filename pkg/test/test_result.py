import unittest

from tuberepair.errors import CarveError
from tuberepair.result import Err, Ok, Result


class TestResultMonad(unittest.TestCase):
    """
    Monad operations:
    ≡       Identical to
    >>=     bind, flatMap
    """

    def test_monad_left_identity_law(self):
        """Left identity law: return a >>= f ≡ f a"""
        ok_function = lambda x: Ok(x + 1)
        err_function = lambda x: Err("kp2 in largest")

        self.assertEqual(ok_function(10), Ok(10).bind(ok_function))
        self.assertEqual(err_function(10), Err("kp2 in largest").bind(ok_function))

    def test_monad_right_identity_law(self):
        """Right identity law: m >>= return ≡ m"""
        self.assertEqual(Ok(10), Ok(10).bind(Ok))
        self.assertEqual(Err("nothing carved"), Err("nothing carved").bind(Ok))

    def test_monad_associativity_law(self):
        """Associativity law: (m >>= f) >>= g ≡ m >>= (\\x -> f x >>= g)"""
        f = lambda x: Ok(x * 2)
        g = lambda x: Ok(x - 1) if x < 100 else Err(["too large"])
        for m in (Ok(3), Ok(60), Err(["carve"])):
            self.assertEqual(m.bind(f).bind(g), m.bind(lambda x: f(x).bind(g)))


class TestResultOperations(unittest.TestCase):

    def test_map(self):
        self.assertEqual(Ok(4), Ok(2).map(lambda x: x * 2))
        self.assertEqual(Err("e"), Err("e").map(lambda x: x * 2))

    def test_bind_err_retries_only_errors(self):
        calls = []

        def retry(error):
            calls.append(error)
            return Ok("second attempt")

        self.assertEqual(Ok("first"), Ok("first").bind_err(retry))
        self.assertEqual([], calls)
        self.assertEqual(Ok("second attempt"), Err("rejected").bind_err(retry))
        self.assertEqual(["rejected"], calls)

    def test_unwrap(self):
        self.assertEqual(1, Ok(1).unwrap())
        with self.assertRaises(CarveError):
            Err(CarveError("carve produced invalid topology")).unwrap()
        with self.assertRaises(Exception) as context:
            Err(["kp1 not foreground"]).unwrap()
        self.assertIn("kp1 not foreground", str(context.exception))

    def test_defaults(self):
        self.assertEqual(["e"], Err(["e"]).unwrap_err_or([]))
        self.assertEqual([], Ok(1).unwrap_err_or([]))

    def test_safe(self):
        self.assertEqual(Ok(2), Result.safe(lambda: 1 + 1))
        result = Result.safe(lambda: 1 / 0)
        self.assertTrue(result.is_err())
        self.assertIsInstance(result.unwrap_err_or(None), ZeroDivisionError)

    def test_equality_and_str(self):
        self.assertEqual("Ok(1)", str(Ok(1)))
        self.assertEqual("Err(x)", repr(Err("x")))
        self.assertNotEqual(Ok(1), Ok("1"))
        self.assertNotEqual(Ok(1), Err(1))
        self.assertNotEqual(Ok(1), 1)


if __name__ == '__main__':
    unittest.main()
