"""
MB-FCN CLI - Multi-branch face detection toolkit

Train, run and evaluate a multi-branch fully convolutional face detector
on synthetic or WIDER-style data.
"""

__version__ = "0.3.0"
__author__ = "MB-FCN Team"
