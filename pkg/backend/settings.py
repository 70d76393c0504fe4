# backend/settings.py
import os
from dotenv import load_dotenv

# load environment variables from the .env file next to this module
load_dotenv(dotenv_path=os.path.join(os.path.dirname(__file__), ".env"))

OUT_DIR = os.getenv("CBD_OUT_DIR", "runs")
LOG_LEVEL = os.getenv("CBD_LOG_LEVEL", "INFO").upper()


def _int_env(key, default):
    value = os.getenv(key)
    if value is None or value.strip() == "":
        return default
    try:
        return max(1, int(value))
    except ValueError:
        return default


# worker threads for evaluations that are allowed to run in parallel
WORKERS = _int_env("CBD_WORKERS", 1)


def out_path(*parts, out_dir=None):
    """Join parts under the configured output directory, creating it if needed"""
    base = out_dir or OUT_DIR
    os.makedirs(base, exist_ok=True)
    return os.path.join(base, *parts)
