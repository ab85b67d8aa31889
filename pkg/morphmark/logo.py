from ._version import __version__

ASCII_ART = rf"""
                                 _                         _
      _ __ ___   ___  _ __ _ __ | |__  _ __ ___   __ _ _ __| | __
     | '_ ` _ \ / _ \| '__| '_ \| '_ \| '_ ` _ \ / _` | '__| |/ /
     | | | | | | (_) | |  | |_) | | | | | | | | | (_| | |  |   <
     |_| |_| |_|\___/|_|  | .__/|_| |_|_| |_| |_|\__,_|_|  |_|\_\
                          |_|

      one labeled image in, every landmark out.

                    VERSION {__version__}
"""

__doc__ = f"""
```python
{ASCII_ART}
```
"""
