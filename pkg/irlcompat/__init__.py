# Package marker for the irlcompat module.
__version__ = "0.1.0"
