"""Segmentation metrics on a hand-made prediction.

Run: python3 demos/metrics_walkthrough.py
"""
import numpy as np

from eraseredraw import segharness as sh

gt = np.zeros((8, 8), np.uint8)
gt[4:, :] = 1                      # bottom half is free space
pred = np.zeros_like(gt)
pred[3:7, :] = 1                   # one row too high, one row short

c = sh.confusion(pred, gt)
print(f"TP={c.tp} TN={c.tn} FP={c.fp} FN={c.fn}")
m = sh.metrics(c)
for k, v in m.items():
    print(f"{k:9s} {v:.4f}")
print(f"F1 from IoU: {2 * m['iou'] / (1 + m['iou']):.4f}")

# Empty prediction on an empty label counts as perfect; the table averages per image.
print("all-negative image:", sh.metrics(sh.confusion(np.zeros_like(gt), np.zeros_like(gt))))
