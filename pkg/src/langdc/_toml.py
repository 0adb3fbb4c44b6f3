try:  # Python 3.11+
    import tomllib as toml
except ModuleNotFoundError:  # pragma: no cover
    import tomli as toml


def load_toml(path):
    with open(path, "rb") as fh:
        return toml.load(fh)


TOMLDecodeError = toml.TOMLDecodeError
