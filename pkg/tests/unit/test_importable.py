"""Basic set of tests to ensure entire code base is importable"""
import pytest


def test_importable():
    """Simple smoketest to ensure all morphmark modules are importable"""

    import morphmark
    import morphmark._version
    import morphmark.api
    import morphmark.autodiff
    import morphmark.c2t
    import morphmark.dataset
    import morphmark.exceptions
    import morphmark.format
    import morphmark.grid
    import morphmark.io
    import morphmark.logo
    import morphmark.losses
    import morphmark.main
    import morphmark.overlay
    import morphmark.presets
    import morphmark.regnet
    import morphmark.settings
    import morphmark.stage1
    import morphmark.synthbench
    import morphmark.transform

    assert set(morphmark.__all__) <= set(dir(morphmark))

    with pytest.raises(SystemExit):
        import morphmark.__main__  # noqa: F401
