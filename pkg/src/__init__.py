"""XBusNet - dual-prompt, dual-branch text-guided breast ultrasound segmentation"""

__version__ = "1.0.0"
