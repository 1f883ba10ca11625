import struct

def tensor(dims, values):
    out = b"MCLR" + struct.pack("<II", 1, len(dims)) + struct.pack("<%dI" % len(dims), *dims)
    return out + struct.pack("<%df" % len(values), *values)

with open("golden_2x3.mclr", "wb") as f:
    f.write(tensor([2, 3], [1.0, -2.5, 3.0, 0.125, 1e-3, -0.0]))
with open("golden_scalar.mclr", "wb") as f:
    f.write(tensor([], [7.0]))
