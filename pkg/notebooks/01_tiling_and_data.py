# coding: utf-8

# # Tiling aerial tiles into training patches
#
# Large aerial tiles are cut into fixed-size square patches on a regular grid.
# The grid count is ``(floor((H - p) / s) + 1) * (floor((W - p) / s) + 1)``.
# Partial patches at the right and bottom edges are dropped.

# In[1]:

import numpy as np

from stdaseg.data import (ISPRS_CLASSES, ISPRS_PALETTE, RawTile, ShiftSpec, crop_tile, decode_label,
                          encode_label, grid_count, reassemble, synth_dataset, tile_grid)


# A 6000 x 6000 tile cut into 512 patches with stride 512 gives an 11 x 11 grid.

# In[2]:

print(grid_count(6000, 6000, 512, 512))
print(tile_grid(1024, 768, 512, 256))


# Cropping and reassembly are exact inverses whenever the grid covers the tile.

# In[3]:

g = np.random.default_rng(0)
label = g.integers(0, 6, size=(32, 48))
tile = RawTile(decode_label(label, ISPRS_PALETTE), label, "demo")
patches = crop_tile(tile, 16, 16)
pixels, labels = reassemble(patches, (32, 48))
print(len(patches), np.array_equal(pixels, tile.pixels), np.array_equal(labels, label))


# Labels are stored as RGB images in the benchmark palette and encoded to class indices.

# In[4]:

print(list(zip(ISPRS_CLASSES, ISPRS_PALETTE)))
print(np.array_equal(encode_label(decode_label(label, ISPRS_PALETTE), ISPRS_PALETTE), label))


# # A synthetic domain pair
#
# The synthetic generator gives each class a grey level, a tint and a texture.
# The target domain is the source domain under a channel permutation.
# Grey level and texture survive the permutation, the tint does not.

# In[5]:

source, target = synth_dataset(seed=0, n_tiles=2, shift=ShiftSpec((2, 0, 1)))
xs, ys = source.load_batch([0, 1])
xt, yt = target.load_batch([0, 1])
print(len(source), len(target), tuple(xs.shape), target.labels_eval_only)
print("same labels:", bool((ys == yt).all()))
print("channel means source", xs.mean(dim=(0, 2, 3)).numpy().round(3))
print("channel means target", xt.mean(dim=(0, 2, 3)).numpy().round(3))
