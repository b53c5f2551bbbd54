//! The multi-task encoder-decoder network.
//!
//! The encoder halves the spatial extent per stage down to a 1x1 bottleneck;
//! the decoder mirrors it back up, joining each resolution with the matching
//! encoder stage through a lateral skip (channel concat + 1x1 merge). Four
//! heads hang off the trunk: two 6-output pose heads at the bottleneck (the
//! global, holistic attachment point; they can be relocated to the decoder
//! end for the placement experiment), a per-landmark heatmap head (1x1 conv +
//! per-channel spatial softmax) and a visibility head (1x1 conv to logit
//! pairs, pooled over the full map, per-pair softmax) at the decoder end.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Shape2D;
use crate::tensor::{load_params, save_params, Activations, Graph, GraphBuilder, Mode, NodeId, Tensor};

/// Where the two pose heads attach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseHeadLocation {
    Bottleneck,
    DecoderEnd,
}

impl PoseHeadLocation {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoseHeadLocation::Bottleneck => "bottleneck",
            PoseHeadLocation::DecoderEnd => "decoder_end",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bottleneck" => Ok(PoseHeadLocation::Bottleneck),
            "decoder_end" => Ok(PoseHeadLocation::DecoderEnd),
            other => Err(Error::InvalidConfig(format!("unknown pose head location `{other}`"))),
        }
    }
}

/// Network hyperparameters. `stages` is derived as log2(input_size) + 1 so
/// the encoder bottoms out at 1x1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub bottleneck_channels: usize,
    pub num_landmarks: usize,
    pub pose_head_location: PoseHeadLocation,
}

impl NetConfig {
    /// Desk-scale defaults: 64x64 input, 8 to 32 channels, 21 landmarks.
    pub fn toy(num_landmarks: usize) -> Self {
        NetConfig {
            input_size: 64,
            base_channels: 8,
            bottleneck_channels: 32,
            num_landmarks,
            pose_head_location: PoseHeadLocation::Bottleneck,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 16 || !self.input_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "input_size must be a power of two >= 16, got {}",
                self.input_size
            )));
        }
        if self.base_channels == 0 || self.bottleneck_channels < self.base_channels {
            return Err(Error::InvalidConfig(format!(
                "need 0 < base_channels <= bottleneck_channels, got {} and {}",
                self.base_channels, self.bottleneck_channels
            )));
        }
        if self.num_landmarks < 3 {
            return Err(Error::InvalidConfig(format!(
                "num_landmarks must be at least 3, got {}",
                self.num_landmarks
            )));
        }
        Ok(())
    }

    /// Encoder/decoder stage count, including the full-resolution stem stage.
    pub fn stages(&self) -> usize {
        (self.input_size as f64).log2() as usize + 1
    }

    /// Channels of stage `k` (0 = full resolution): doubling from
    /// base_channels, capped at bottleneck_channels.
    pub fn stage_channels(&self, k: usize) -> usize {
        (self.base_channels << k).min(self.bottleneck_channels)
    }

    /// Serialize as key=value lines, the checkpoint sidecar format.
    pub fn to_sidecar(&self) -> String {
        format!(
            "input_size={}\nbase_channels={}\nbottleneck_channels={}\nnum_landmarks={}\npose_head_location={}\n",
            self.input_size,
            self.base_channels,
            self.bottleneck_channels,
            self.num_landmarks,
            self.pose_head_location.as_str()
        )
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| -> Result<&String> {
            map.get(key).ok_or_else(|| Error::Format(format!("sidecar missing `{key}`")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|e| Error::Format(format!("bad `{key}`: {e}")))
        };
        let config = NetConfig {
            input_size: parse_usize("input_size")?,
            base_channels: parse_usize("base_channels")?,
            bottleneck_channels: parse_usize("bottleneck_channels")?,
            num_landmarks: parse_usize("num_landmarks")?,
            pose_head_location: PoseHeadLocation::parse(get("pose_head_location")?)?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Per-landmark probability maps of one image, channel-last [S, S, L],
/// each map summing to 1.
#[derive(Debug, Clone)]
pub struct HeatmapStack {
    pub size: usize,
    pub count: usize,
    data: Vec<f64>,
}

impl HeatmapStack {
    pub fn new(size: usize, count: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size * count {
            return Err(Error::shape(
                "HeatmapStack",
                format!("{} values", size * size * count),
                format!("{}", data.len()),
            ));
        }
        Ok(HeatmapStack { size, count, data })
    }

    #[inline]
    pub fn at(&self, landmark: usize, x: usize, y: usize) -> f64 {
        self.data[(y * self.size + x) * self.count + landmark]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map_sum(&self, landmark: usize) -> f64 {
        let mut sum = 0.0;
        for p in 0..self.size * self.size {
            sum += self.data[p * self.count + landmark];
        }
        sum
    }
}

/// Locate each landmark at the maximum response of its heatmap; ties break
/// toward the smallest row-major pixel index. Returns (x, y) pixel coords.
pub fn heatmap_argmax(heatmaps: &HeatmapStack) -> Shape2D {
    let s = heatmaps.size;
    let mut points = Vec::with_capacity(heatmaps.count);
    for l in 0..heatmaps.count {
        let mut best = f64::NEG_INFINITY;
        let mut best_xy = [0.0, 0.0];
        for y in 0..s {
            for x in 0..s {
                let v = heatmaps.at(l, x, y);
                if v > best {
                    best = v;
                    best_xy = [x as f64, y as f64];
                }
            }
        }
        points.push(best_xy);
    }
    Shape2D(points)
}

/// Decoded outputs of one forward pass: raw 6-vectors from the two pose
/// heads, heatmap stacks, and per-landmark (visible, occluded) probability
/// pairs, one entry per image.
#[derive(Debug, Clone)]
pub struct NetOutputs {
    pub pose_l2: Vec<[f64; 6]>,
    pub pose_align: Vec<[f64; 6]>,
    pub heatmaps: Vec<HeatmapStack>,
    pub visibility: Vec<Vec<[f64; 2]>>,
}

/// Node ids of the network's interface points.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub bottleneck: NodeId,
    pub decoder_end: NodeId,
    pub pose_l2: NodeId,
    pub pose_align: NodeId,
    pub heatmaps: NodeId,
    pub visibility: NodeId,
}

/// The trained artifact: graph plus configuration and head bookkeeping.
#[derive(Debug, Clone)]
pub struct MultiTaskNet {
    pub graph: Graph,
    config: NetConfig,
    heads: HeadNodes,
}

impl MultiTaskNet {
    /// Build the network with freshly initialized parameters.
    pub fn build<R: Rng>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stages = config.stages();
        let mut b = GraphBuilder::new();
        let input = b.input([config.input_size, config.input_size, 3])?;

        // Encoder: full-resolution stem, then one downsampling residual
        // block per stage.
        let stem_conv = b.conv("enc0", input, config.base_channels, 3, 1, 1)?;
        let stem_bn = b.batch_norm("enc0_bn", stem_conv)?;
        let mut enc = vec![b.relu("enc0_relu", stem_bn)?];
        for k in 1..stages {
            let block = b.residual_bottleneck(&format!("enc{k}"), enc[k - 1], config.stage_channels(k), 2)?;
            enc.push(block);
        }
        let bottleneck = enc[stages - 1];

        // Decoder: upsample, merge the lateral skip, refine.
        let mut d = bottleneck;
        for k in (0..stages - 1).rev() {
            let c = config.stage_channels(k);
            let up = b.upsample_conv(&format!("dec{k}_up"), d, c, 3)?;
            let up_bn = b.batch_norm(&format!("dec{k}_up_bn"), up)?;
            let up_relu = b.relu(&format!("dec{k}_up_relu"), up_bn)?;
            let cat = b.concat(&format!("dec{k}_cat"), &[up_relu, enc[k]])?;
            let merge = b.conv(&format!("dec{k}_merge"), cat, c, 1, 1, 0)?;
            let merge_bn = b.batch_norm(&format!("dec{k}_merge_bn"), merge)?;
            let merge_relu = b.relu(&format!("dec{k}_merge_relu"), merge_bn)?;
            d = b.residual_bottleneck(&format!("dec{k}"), merge_relu, c, 1)?;
        }
        let decoder_end = d;

        let pose_attach = match config.pose_head_location {
            PoseHeadLocation::Bottleneck => bottleneck,
            PoseHeadLocation::DecoderEnd => decoder_end,
        };
        let pose_l2 = b.fully_connected("head_pose_l2", pose_attach, 6)?;
        let pose_align = b.fully_connected("head_pose_align", pose_attach, 6)?;

        let hm_conv = b.conv("head_heatmap", decoder_end, config.num_landmarks, 1, 1, 0)?;
        let heatmaps = b.spatial_softmax("head_heatmap_sm", hm_conv)?;

        let vis_conv = b.conv("head_vis", decoder_end, 2 * config.num_landmarks, 1, 1, 0)?;
        let vis_pool = b.global_avg_pool("head_vis_pool", vis_conv)?;
        let visibility = b.pair_softmax("head_vis_sm", vis_pool)?;

        let graph = b.finish(rng)?;
        Ok(MultiTaskNet {
            graph,
            config,
            heads: HeadNodes {
                bottleneck,
                decoder_end,
                pose_l2,
                pose_align,
                heatmaps,
                visibility,
            },
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn heads(&self) -> &HeadNodes {
        &self.heads
    }

    /// Number of trainable scalars outside the pose heads. Relocating the
    /// pose heads must not change this.
    pub fn trunk_param_count(&self) -> usize {
        self.graph
            .trainable_names()
            .filter(|n| !n.starts_with("head_pose"))
            .map(|n| self.graph.param(n).unwrap().len())
            .sum()
    }

    /// Run the network on an image batch [N, S, S, 3] with values in [0, 1].
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<Activations> {
        self.graph.forward(images, mode)
    }

    /// Decode the head activations into per-image outputs.
    pub fn outputs(&self, acts: &Activations) -> NetOutputs {
        let l = self.config.num_landmarks;
        let s = self.config.input_size;

        let decode_pose = |t: &Tensor| -> Vec<[f64; 6]> {
            t.data().chunks(6).map(|c| std::array::from_fn(|k| c[k])).collect()
        };
        let pose_l2 = decode_pose(acts.value(self.heads.pose_l2));
        let pose_align = decode_pose(acts.value(self.heads.pose_align));

        let hm = acts.value(self.heads.heatmaps);
        let n = hm.shape()[0];
        let per = s * s * l;
        let heatmaps = (0..n)
            .map(|i| HeatmapStack::new(s, l, hm.data()[i * per..(i + 1) * per].to_vec()).expect("head shape"))
            .collect();

        let vis = acts.value(self.heads.visibility);
        let visibility = (0..n)
            .map(|i| {
                (0..l)
                    .map(|lm| {
                        let base = i * 2 * l + 2 * lm;
                        [vis.data()[base], vis.data()[base + 1]]
                    })
                    .collect()
            })
            .collect();

        NetOutputs {
            pose_l2,
            pose_align,
            heatmaps,
            visibility,
        }
    }

    /// Write the parameter checkpoint to `path` and the config sidecar to
    /// `path` + ".cfg".
    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, self.graph.params())?;
        std::fs::write(sidecar_path(path), self.config.to_sidecar())?;
        Ok(())
    }

    /// Rebuild a saved network from its checkpoint and sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let config = NetConfig::from_sidecar(&std::fs::read_to_string(sidecar_path(path))?)?;
        // Parameter values come from the checkpoint; the rng only shapes the
        // graph structure.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = MultiTaskNet::build(config, &mut rng)?;
        net.graph.set_params(load_params(path)?)?;
        Ok(net)
    }
}

use rand::SeedableRng;

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".cfg");
    std::path::PathBuf::from(os)
}
