import os


def test():
    os.system("python -m unittest -v")
