"""HDF5 archive of leak results

The archive holds the ground-truth victim, the ledgers, profiles and
recovery curves of the attack arms and the trained substitutes.
"""

import h5py
import numpy as np

from .bitprofile import BitProfile
from .leak import LeakLedger, RecoveryCurve
from .victim import QuantizedLayer, VictimModel
from ._version import version as __version__


COMPRESSION = {"compression": "gzip",
               "compression_opts": 9,
               }


def write_dataset(group, key, data, h5dtype=None):
    """Write an array to an HDF5 group as a dataset

    Compression and the fletcher32 filter are applied for files on
    disk (not for in-memory files).

    Parameters
    ----------
    group: h5py.Group
        HDF5 group to store data to
    key: str
        Dataset identifier
    data: np.ndarray
        Data to store
    h5dtype: str or dtype
        The datatype in which to store the data. The default
        is the datatype of `data`.

    Returns
    -------
    dataset: h5py.Dataset
    """
    data = np.asarray(data)
    if h5dtype is None:
        h5dtype = data.dtype
    if key in group:
        del group[key]
    if group.file.driver == "core" or data.ndim == 0 or data.size == 0:
        kwargs = {}
    else:
        kwargs = {"fletcher32": True,
                  "chunks": data.shape}
        kwargs.update(COMPRESSION)
    return group.create_dataset(key, data=data.astype(h5dtype), **kwargs)


def write_victim(group, victim):
    """Store quantized codes, scales and biases of a victim model"""
    group.attrs["layers"] = len(victim.layers)
    group.attrs["has_seed"] = victim.seed is not None
    group.attrs["seed"] = np.uint64(0 if victim.seed is None else victim.seed)
    for ll, (layer, bias) in enumerate(zip(victim.layers, victim.biases)):
        sub = group.require_group("layer_{}".format(ll))
        write_dataset(sub, "codes", layer.codes)
        write_dataset(sub, "bias", bias)
        sub.attrs["scale"] = layer.scale


def read_victim(group, chunk_rows=512, chunk_cols=8, page_size_bytes=4096):
    layers = []
    biases = []
    for ll in range(int(group.attrs["layers"])):
        sub = group["layer_{}".format(ll)]
        layers.append(QuantizedLayer(sub["codes"][:],
                                     float(sub.attrs["scale"])))
        biases.append(sub["bias"][:])
    seed = int(group.attrs["seed"]) if group.attrs["has_seed"] else None
    return VictimModel(layers, biases=biases,
                       seed=seed,
                       chunk_rows=chunk_rows, chunk_cols=chunk_cols,
                       page_size_bytes=page_size_bytes)


class LeakArchive(object):
    # required to create in-memory HDF5 files with unique fd
    _instances = 0

    def __init__(self, h5file=None, h5mode="a"):
        """Storage of the results of an experiment

        Parameters
        ----------
        h5file: str, pathlib.Path, h5py.Group, h5py.File, or None
            A path to an HDF5 file. If set to `None` (default), all
            data are handled in memory using the "core" driver of
            :class:`h5py:File`. If this is an instance of h5py.Group
            or h5py.File, then this will be used to store all data.
        h5mode: str
            File mode (only applies if `h5file` is a path)
        """
        if isinstance(h5file, h5py.Group):
            self.h5 = h5file
            self._do_h5_cleanup = False
        else:
            if h5file is None:
                h5kwargs = {"name": "bitleak{}.h5".format(
                                LeakArchive._instances),
                            "driver": "core",
                            "backing_store": False,
                            "mode": "w"}
            else:
                h5kwargs = {"name": h5file,
                            "mode": h5mode}
            self.h5 = h5py.File(**h5kwargs)
            self._do_h5_cleanup = True
        LeakArchive._instances += 1
        if "bitleak version" not in self.h5.attrs \
                and self.h5.file.mode != "r":
            self.h5.attrs["bitleak version"] = __version__

    def __contains__(self, key):
        return key in self.h5

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self._do_h5_cleanup:
            self.h5.flush()
            self.h5.close()

    def __repr__(self):
        return "LeakArchive({}, {} ledgers)".format(
            self.h5.file.filename, len(self.ledger_names()))

    def _group(self, name):
        return self.h5.require_group(name)

    def set_victim(self, victim):
        if "victim" in self.h5:
            del self.h5["victim"]
        write_victim(self.h5.create_group("victim"), victim)
        self.h5["victim"].attrs["chunk_rows"] = \
            victim.address_map.chunk_rows
        self.h5["victim"].attrs["chunk_cols"] = \
            victim.address_map.chunk_cols
        self.h5["victim"].attrs["page_size_bytes"] = \
            victim.address_map.page_size_bytes

    def get_victim(self):
        if "victim" not in self.h5:
            raise KeyError("No victim in {}!".format(self))
        grp = self.h5["victim"]
        return read_victim(grp,
                           chunk_rows=int(grp.attrs["chunk_rows"]),
                           chunk_cols=int(grp.attrs["chunk_cols"]),
                           page_size_bytes=int(grp.attrs["page_size_bytes"]))

    def ledger_names(self):
        return sorted(self.h5["ledgers"].keys()) if "ledgers" in self.h5 \
            else []

    def set_ledger(self, name, ledger):
        grp = self._group("ledgers").require_group(name)
        write_dataset(grp, "known", ledger.known.astype(np.uint8))
        write_dataset(grp, "values", ledger.values)
        write_dataset(grp, "round_of_discovery", ledger.round_of_discovery)
        grp.attrs["layer_shapes"] = np.array(ledger.layer_shapes,
                                             dtype=np.int64).reshape(-1, 2)

    def get_ledger(self, name):
        grp = self.h5["ledgers"][name]
        ledger = LeakLedger([tuple(s) for s in grp.attrs["layer_shapes"]])
        ledger.known[:] = grp["known"][:].astype(bool)
        ledger.values[:] = grp["values"][:]
        ledger.round_of_discovery[:] = grp["round_of_discovery"][:]
        return ledger

    def profile_names(self):
        return sorted(self.h5["profiles"].keys()) if "profiles" in self.h5 \
            else []

    def set_profile(self, name, profile):
        grp = self._group("profiles").require_group(name)
        write_dataset(grp, "prefix", profile.prefix)
        write_dataset(grp, "value_bytes", profile.value_bytes)
        grp.attrs["scales"] = np.array(profile.scales)
        grp.attrs["max_prefix"] = profile.max_prefix
        grp.attrs["layer_shapes"] = np.array(profile.layer_shapes,
                                             dtype=np.int64).reshape(-1, 2)

    def get_profile(self, name):
        grp = self.h5["profiles"][name]
        return BitProfile([tuple(s) for s in grp.attrs["layer_shapes"]],
                          list(grp.attrs["scales"]),
                          grp["prefix"][:],
                          grp["value_bytes"][:],
                          max_prefix=int(grp.attrs["max_prefix"]))

    def set_curve(self, name, curve):
        grp = self._group("curves").require_group(name)
        write_dataset(grp, "data", curve.data)
        write_dataset(grp, "layer_msb", curve.layer_msb)

    def get_curve(self, name):
        grp = self.h5["curves"][name]
        layer_msb = grp["layer_msb"][:]
        curve = RecoveryCurve(n_layers=layer_msb.shape[1])
        curve._rows = grp["data"][:].tolist()
        curve._layer_msb = list(layer_msb)
        return curve

    def set_substitute(self, name, weights, biases):
        grp = self._group("substitutes").require_group(name)
        for ll, (ww, bb) in enumerate(zip(weights, biases)):
            write_dataset(grp, "weight_{}".format(ll), ww)
            write_dataset(grp, "bias_{}".format(ll), bb)
        grp.attrs["layers"] = len(weights)

    def get_substitute(self, name):
        grp = self.h5["substitutes"][name]
        n = int(grp.attrs["layers"])
        return ([grp["weight_{}".format(ll)][:] for ll in range(n)],
                [grp["bias_{}".format(ll)][:] for ll in range(n)])

