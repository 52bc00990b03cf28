import hashlib
import json

from django.conf import settings

DEFAULTS = {
    'PATCH_RESOLUTION': 512,
    'RENDER_RESOLUTION': 256,
    'MAX_MODEL_POINTS': 2000,
    'EXTERNAL_CRITIC_TIMEOUT_S': 10.0,
    'DEFAULT_REFINEMENT_CONFIG': None,
    'MESH_DIR': None,
    'WORKERS': 1,
}


def ppc_setting(name):
    """Read a toolkit setting from ``settings.PPC``, falling back to DEFAULTS."""
    if name not in DEFAULTS:
        raise KeyError(f"Unknown PPC setting: {name}")
    user = getattr(settings, 'PPC', {}) if settings.configured else {}
    return user.get(name, DEFAULTS[name])


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)


def config_hash(data) -> str:
    """sha256 of the canonical JSON form of an effective configuration."""
    return hashlib.sha256(canonical_json(data).encode('utf-8')).hexdigest()
