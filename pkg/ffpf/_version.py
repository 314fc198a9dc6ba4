import os
from subprocess import getstatusoutput

FALLBACK_VERSION = "0.0.0"


def get_version_tag() -> str:
    """``FFPF_VERSION`` if set, else the latest git tag without its ``v`` prefix."""
    version = os.environ.get("FFPF_VERSION")
    if version is None:
        status, version = getstatusoutput("git describe --tags --abbrev=0")
        if status != 0:
            return FALLBACK_VERSION

    version = version.strip()
    if not version:
        return FALLBACK_VERSION
    return version.removeprefix("v")


VERSION = get_version_tag()
