"""Train position regressors on single modalities and on a fused frame.

Builds aligned fusion frames from 480 s of simulated data, trains one MLP
per feature subset and prints the held-out median error of each.  Takes a
minute or two: the CSI-bearing models are 677+ inputs wide.
"""

from indoor_fusion.ingest import frames_to_arrays, ingest_run, select_blocks
from indoor_fusion.mlp import MlpConfig, SplitSpec, split_dataset, train_arrays
from indoor_fusion.simulate import SimConfig, build_scenario, simulate_run

SUBSETS = {
    "nn:csi": ["csi"],
    "nn:rssi": ["rssi"],
    "nn:uwb": ["uwb"],
    "nn:imu": ["imu"],
    "fusion csi+imu": ["csi", "imu"],
}


def main():
    scenario = build_scenario(7)
    config = SimConfig(duration=480.0)
    records = simulate_run(scenario, config)
    result = ingest_run(records, scenario.sensor_offsets, config.rates,
                        config.duration)
    print(f"{len(result.frames)} frames, layout "
          f"{[(b.modality, b.width) for b in result.layout.blocks]}")

    for name, blocks in SUBSETS.items():
        frames, layout = select_blocks(result.frames, result.layout, blocks)
        train_f, test_f = split_dataset(frames, SplitSpec(shuffle_seed=42))
        nn_config = MlpConfig.for_input(
            layout.feature_width + layout.mask_width, epochs=40, seed=42)
        model, history = train_arrays(*frames_to_arrays(train_f),
                                      *frames_to_arrays(test_f), nn_config)
        best = min(h[2] for h in history)
        print(f"{name:15s} width={nn_config.layer_sizes[0]:4d} "
              f"epochs={len(history):3d} test median={best:.3f} m")


if __name__ == "__main__":
    main()
