from unittest.mock import patch

from ffpf._version import FALLBACK_VERSION, get_version_tag


class TestVersionTag:
    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("FFPF_VERSION", "1.2.3")
        assert get_version_tag() == "1.2.3"

    @patch("ffpf._version.getstatusoutput")
    def test_git_tag_prefix_stripped(self, mock_git, monkeypatch):
        monkeypatch.delenv("FFPF_VERSION", raising=False)
        mock_git.return_value = (0, "v0.4.1\n")
        assert get_version_tag() == "0.4.1"

    @patch("ffpf._version.getstatusoutput")
    def test_no_git_falls_back(self, mock_git, monkeypatch):
        monkeypatch.delenv("FFPF_VERSION", raising=False)
        mock_git.return_value = (128, "fatal: not a git repository")
        assert get_version_tag() == FALLBACK_VERSION

    def test_empty_env_falls_back(self, monkeypatch):
        monkeypatch.setenv("FFPF_VERSION", "  ")
        assert get_version_tag() == FALLBACK_VERSION
