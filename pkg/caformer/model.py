import json

import numpy as np
from gym import logger
from gym.utils import seeding

from caformer import heads
from caformer.backbone import ABLATIONS, CaformerConfig, CaformerParams, backbone_forward, init_backbone_params
from caformer.errors import ArtifactError, ContractError
from caformer.heads import HeadConfig

CHECKPOINT_FORMAT = 1


class Caformer(object):
    """
    Description:
        Backbone plus one task head. Inputs are (..., M, L_in) windows already
        z-scored by the train-split scaler; outputs come back in that space.

    Source:
        Parameters are created from seed unless an existing CaformerParams is
        passed in; the ablation switch selects one of the four variants.
    """

    def __init__(self, config: CaformerConfig, head_config: HeadConfig, params=None, ablation="full", seed=0):
        if ablation not in ABLATIONS:
            raise ContractError("unknown ablation %r, expected one of %s" % (ablation, ABLATIONS))
        self.config = config
        self.head_config = head_config
        self.ablation = ablation
        # train-split scaler, set by training
        self.scaler = None
        if params is None:
            rng, _ = seeding.np_random(int(seed))
            arrays = init_backbone_params(config, rng)
            arrays.update(heads.init_head_params(config, head_config, rng))
            params = CaformerParams(arrays)
        self.params = params

    def forward(self, X, trace=False):
        """Returns (prediction NdArray, BackboneOutput)."""
        out = backbone_forward(X, self.config, self.params, self.ablation, trace=trace)
        task = self.head_config.task
        if self.head_config.is_forecast:
            pred = heads.instance_denormalize(heads.forecast_head(out.s_temporal, self.params), out.patches)
        elif task == "classification":
            pred = heads.classification_head(out.s_temporal, self.params)
        else:
            raw = heads.reconstruction_head(out.s_temporal, self.params)
            pred = heads.instance_denormalize(raw, out.patches, reconstruction=True)
        return pred, out

    def predict(self, X):
        return self.forward(X)[0].data

    def screened_reconstruction(self, X):
        """
        Reconstruction used for anomaly scores. Steps whose first-pass residual
        is an outlier in its row are bridged by interpolation and the window is
        reconstructed again, so the patch statistics around an isolated spike
        are those of the bridged series. Returns (reconstruction, flagged).
        """
        first = self.predict(X)
        flagged = heads.outlier_steps(np.asarray(X, dtype=np.float64) - first)
        return self.predict(heads.bridge(X, flagged)), flagged

    def with_params(self, params):
        return Caformer(self.config, self.head_config, params=params, ablation=self.ablation)

    def save(self, path):
        """Write an .npz checkpoint: little-endian float64 arrays plus the embedded configuration."""
        meta = {"caformer": self.config.to_dict(), "head": self.head_config.to_dict(), "ablation": self.ablation}
        arrays = {name: np.asarray(value, dtype="<f8") for name, value in self.params.state().items()}
        arrays["__format__"] = np.array(CHECKPOINT_FORMAT)
        arrays["__config__"] = np.array(json.dumps(meta, sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        try:
            archive = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise ArtifactError("cannot read checkpoint %s: %s" % (path, exc)) from None
        with archive:
            version = int(archive["__format__"])
            if version != CHECKPOINT_FORMAT:
                raise ArtifactError("%s: checkpoint format %d, expected %d" % (path, version, CHECKPOINT_FORMAT))
            meta = json.loads(str(archive["__config__"]))
            state = {name: archive[name] for name in archive.files if not name.startswith("__")}
        model = cls(CaformerConfig.from_dict(meta["caformer"]), HeadConfig.from_dict(meta["head"]),
                    params=CaformerParams(state), ablation=meta["ablation"])
        logger.debug("loaded %d parameters from %s", len(state), path)
        return model
