//! Dense volumes and feature maps, dilated 3D convolution and activations.
//!
//! All arrays are flat, row-major over `(x, y, z)` with `z` fastest. Feature
//! maps are channel-major: channel `c` occupies one contiguous `X·Y·Z` block.
//!
//! The convolution follows the dilated form
//! `out[f, v] = Σ_t Σ_c w[f, c, t] · h[c, v − l·t] + b[f]`, where `t` ranges
//! over the half-extent box `{−a..a}×{−b..b}×{−c..c}` and reads outside the
//! input contribute zero. Sums are accumulated in `f64` in a fixed order, so
//! results do not depend on how work is split across threads.

use std::path::Path;

use crate::conv_kernel::{gather_conv, weight_grad, Geometry};
use crate::error::{Error, Result};
use crate::io_util;

pub type Dims = [usize; 3];

/// Storage scalar for the internal convolution kernels. Production paths use
/// `f32`; the `f64` instantiation exists for finite-difference checks.
pub trait Real: Copy + Send + Sync + Default + PartialOrd + std::fmt::Debug + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// A single-channel 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    dims: Dims,
}

impl Volume {
    pub fn new(data: Vec<f32>, dims: Dims) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "volume data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite voxel value at index {i}"
            )));
        }
        Ok(Self { data, dims })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            data: vec![0.0; voxel_count(dims)],
            dims,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Wraps the volume as a one-channel feature map.
    pub fn into_feature_map(self) -> FeatureMap {
        FeatureMap {
            data: self.data,
            channels: 1,
            dims: self.dims,
        }
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        write_raw_volume(self, path)
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        read_raw_volume(path)
    }
}

/// A multi-channel 3D grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Vec<f32>,
    channels: usize,
    dims: Dims,
}

impl FeatureMap {
    pub fn new(data: Vec<f32>, channels: usize, dims: Dims) -> Result<Self> {
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::Shape(format!(
                "feature map data length {} does not match {} channels × {:?}",
                data.len(),
                channels,
                dims
            )));
        }
        Ok(Self {
            data,
            channels,
            dims,
        })
    }

    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            data: vec![0.0; channels * voxel_count(dims)],
            channels,
            dims,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[((c * self.dims[0] + x) * self.dims[1] + y) * self.dims[2] + z]
    }

    /// Per-voxel argmax over channels; ties resolve to the lowest channel.
    pub fn argmax_channels(&self) -> Vec<u32> {
        let n = self.voxels();
        (0..n)
            .map(|v| {
                let mut best = 0;
                let mut best_val = self.data[v];
                for c in 1..self.channels {
                    let val = self.data[c * n + v];
                    if val > best_val {
                        best = c;
                        best_val = val;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Kernel half-extents `(a, b, c)`, dilation `l` and zero padding `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelShape {
    pub half: [usize; 3],
    pub dilation: usize,
    pub padding: usize,
}

impl KernelShape {
    pub fn new(half: [usize; 3], dilation: usize, padding: usize) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::InvalidInput("dilation must be positive".into()));
        }
        Ok(Self {
            half,
            dilation,
            padding,
        })
    }

    /// Cubic kernel of side `2·half + 1` with shape-preserving padding.
    pub fn cubic_same(half: usize, dilation: usize) -> Self {
        Self {
            half: [half; 3],
            dilation,
            padding: dilation * half,
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            2 * self.half[0] + 1,
            2 * self.half[1] + 1,
            2 * self.half[2] + 1,
        ]
    }

    /// Number of taps in the index set.
    pub fn taps(&self) -> usize {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let grown = input[axis] + 2 * self.padding;
            let span = 2 * self.dilation * self.half[axis];
            if grown <= span {
                return Err(Error::Shape(format!(
                    "kernel span {span} leaves no output along axis {axis} for input {}",
                    input[axis]
                )));
            }
            out[axis] = grown - span;
        }
        Ok(out)
    }

    /// Per-tap offsets from output to input coordinates, taps in row-major
    /// order.
    pub(crate) fn offsets(&self) -> Vec<[isize; 3]> {
        let ext = self.extent();
        let mut out = Vec::with_capacity(self.taps());
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                for k in 0..ext[2] {
                    out.push([self.shift(0, i), self.shift(1, j), self.shift(2, k)]);
                }
            }
        }
        out
    }

    /// Offset added to an output coordinate to find the input coordinate read
    /// by kernel tap `t` (stored index `t + half`) along `axis`.
    fn shift(&self, axis: usize, tap: usize) -> isize {
        let l = self.dilation as isize;
        let a = self.half[axis] as isize;
        l * a - self.padding as isize - l * (tap as isize - a)
    }
}

fn check_weights(
    input_channels: usize,
    filters: usize,
    weights: &[f32],
    biases: Option<&[f32]>,
    shape: &KernelShape,
) -> Result<()> {
    let expected = filters * input_channels * shape.taps();
    if weights.len() != expected {
        return Err(Error::Shape(format!(
            "weights have {} entries, kernel shape {:?} with {} filters × {} channels needs {}",
            weights.len(),
            shape.extent(),
            filters,
            input_channels,
            expected
        )));
    }
    if let Some(b) = biases {
        if b.len() != filters {
            return Err(Error::Shape(format!(
                "{} biases for {} filters",
                b.len(),
                filters
            )));
        }
    }
    Ok(())
}

fn to_f64_vec<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

fn from_f64_vec<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64).collect()
}

/// Sequential convolution over raw channel-major slices; returns `F × out`
/// values. Shapes are assumed checked by the caller.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward_raw<T: Real>(
    input: &[T],
    in_channels: usize,
    in_dims: Dims,
    weights: &[T],
    biases: Option<&[T]>,
    filters: usize,
    shape: &KernelShape,
    out_dims: Dims,
) -> Vec<T> {
    let offsets = shape.offsets();
    let g = Geometry {
        src_dims: in_dims,
        dst_dims: out_dims,
        offsets: &offsets,
    };
    let b = biases.map(to_f64_vec);
    from_f64_vec(gather_conv(
        &to_f64_vec(input),
        in_channels,
        &to_f64_vec(weights),
        b.as_deref(),
        filters,
        &g,
        false,
    ))
}

/// Dilated 3D convolution with zero padding.
///
/// `weights` is laid out `(F, C_in, 2a+1, 2b+1, 2c+1)`; `biases` has one entry
/// per filter. Blocks of output rows are evaluated in parallel; each voxel's
/// sum has a fixed accumulation order, so output is independent of the thread
/// count.
pub fn dilated_conv3d(
    input: &FeatureMap,
    weights: &[f32],
    biases: &[f32],
    shape: &KernelShape,
) -> Result<FeatureMap> {
    let filters = biases.len();
    check_weights(input.channels, filters, weights, Some(biases), shape)?;
    let out_dims = shape.output_dims(input.dims)?;
    let offsets = shape.offsets();
    let g = Geometry {
        src_dims: input.dims,
        dst_dims: out_dims,
        offsets: &offsets,
    };
    let out = gather_conv(
        &to_f64_vec(&input.data),
        input.channels,
        &to_f64_vec(weights),
        Some(&to_f64_vec(biases)),
        filters,
        &g,
        true,
    );
    FeatureMap::new(from_f64_vec(out), filters, out_dims)
}

/// Literal nested-loop evaluation of the dilated convolution. Test oracle:
/// intended for small inputs only.
pub fn naive_conv_oracle(
    input: &FeatureMap,
    weights: &[f32],
    biases: &[f32],
    shape: &KernelShape,
) -> Result<FeatureMap> {
    let filters = biases.len();
    check_weights(input.channels, filters, weights, Some(biases), shape)?;
    let out_dims = shape.output_dims(input.dims)?;
    let [a, b, c] = shape.half.map(|h| h as isize);
    let l = shape.dilation as isize;
    let p = shape.padding as isize;
    let ext = shape.extent();
    let taps = shape.taps();
    let d = input.dims.map(|v| v as isize);
    let mut out = FeatureMap::zeros(filters, out_dims);
    let out_n = voxel_count(out_dims);
    for f in 0..filters {
        for ox in 0..out_dims[0] {
            for oy in 0..out_dims[1] {
                for oz in 0..out_dims[2] {
                    // Centre of the receptive field in input coordinates.
                    let v = [
                        ox as isize - p + l * a,
                        oy as isize - p + l * b,
                        oz as isize - p + l * c,
                    ];
                    let mut sum = biases[f] as f64;
                    for ci in 0..input.channels {
                        for ti in -a..=a {
                            for tj in -b..=b {
                                for tk in -c..=c {
                                    let (x, y, z) = (v[0] - l * ti, v[1] - l * tj, v[2] - l * tk);
                                    if x < 0
                                        || y < 0
                                        || z < 0
                                        || x >= d[0]
                                        || y >= d[1]
                                        || z >= d[2]
                                    {
                                        continue;
                                    }
                                    let widx = (f * input.channels + ci) * taps
                                        + (((ti + a) as usize * ext[1] + (tj + b) as usize)
                                            * ext[2]
                                            + (tk + c) as usize);
                                    sum += weights[widx] as f64
                                        * input.at(ci, x as usize, y as usize, z as usize) as f64;
                                }
                            }
                        }
                    }
                    out.data[f * out_n + (ox * out_dims[1] + oy) * out_dims[2] + oz] = sum as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of the convolution with respect to its input:
/// `dx[c, v + shift(t)] += Σ_f w[f, c, t] · dy[f, v]`.
///
/// Evaluated as a gather with transposed weights and negated offsets; each
/// input voxel sums filters, then taps, in a fixed order.
pub(crate) fn conv_backward_input<T: Real>(
    grad_out: &[T],
    out_dims: Dims,
    weights: &[T],
    filters: usize,
    in_channels: usize,
    in_dims: Dims,
    shape: &KernelShape,
) -> Vec<T> {
    let taps = shape.taps();
    let offsets: Vec<[isize; 3]> = shape.offsets().iter().map(|o| o.map(|v| -v)).collect();
    let mut wt = vec![0f64; in_channels * filters * taps];
    for f in 0..filters {
        for c in 0..in_channels {
            for t in 0..taps {
                wt[(c * filters + f) * taps + t] =
                    weights[(f * in_channels + c) * taps + t].to_f64();
            }
        }
    }
    let g = Geometry {
        src_dims: out_dims,
        dst_dims: in_dims,
        offsets: &offsets,
    };
    from_f64_vec(gather_conv(
        &to_f64_vec(grad_out),
        filters,
        &wt,
        None,
        in_channels,
        &g,
        false,
    ))
}

/// Gradient of the convolution with respect to its weights:
/// `dw[f, c, t] = Σ_v dy[f, v] · x[c, v + shift(t)]`. Returned in `f64`.
pub(crate) fn conv_backward_weights<T: Real>(
    grad_out: &[T],
    out_dims: Dims,
    input: &[T],
    in_channels: usize,
    in_dims: Dims,
    filters: usize,
    shape: &KernelShape,
) -> Vec<f64> {
    let offsets = shape.offsets();
    let g = Geometry {
        src_dims: in_dims,
        dst_dims: out_dims,
        offsets: &offsets,
    };
    weight_grad(
        &to_f64_vec(grad_out),
        filters,
        &to_f64_vec(input),
        in_channels,
        &g,
    )
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
        channels: x.channels,
        dims: x.dims,
    }
}

/// Per-voxel softmax across the channel axis.
pub fn softmax_channels(x: &FeatureMap) -> FeatureMap {
    let n = x.voxels();
    let c = x.channels;
    let mut out = vec![0f32; x.data.len()];
    let mut buf = vec![0f64; c];
    for v in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (k, b) in buf.iter_mut().enumerate() {
            *b = x.data[k * n + v] as f64;
            max = max.max(*b);
        }
        let mut total = 0.0;
        for b in buf.iter_mut() {
            *b = (*b - max).exp();
            total += *b;
        }
        for (k, b) in buf.iter().enumerate() {
            out[k * n + v] = (b / total) as f32;
        }
    }
    FeatureMap {
        data: out,
        channels: c,
        dims: x.dims,
    }
}

/// Number of tiles per axis when cutting `dims` into cubes of side `side`.
pub fn tile_grid(dims: Dims, side: usize) -> Result<Dims> {
    if side == 0 || dims.iter().any(|&d| d == 0 || d % side != 0) {
        return Err(Error::Shape(format!(
            "volume {dims:?} is not divisible into {side}³ tiles"
        )));
    }
    Ok(dims.map(|d| d / side))
}

/// Cuts a multi-channel map into non-overlapping cubes, x-major tile order.
pub fn tile_map(map: &FeatureMap, side: usize) -> Result<Vec<FeatureMap>> {
    let grid = tile_grid(map.dims, side)?;
    let d = map.dims;
    let tile_n = side * side * side;
    let mut tiles = Vec::with_capacity(voxel_count(grid));
    for gx in 0..grid[0] {
        for gy in 0..grid[1] {
            for gz in 0..grid[2] {
                let mut data = Vec::with_capacity(map.channels * tile_n);
                for c in 0..map.channels {
                    let ch = map.channel(c);
                    for x in 0..side {
                        for y in 0..side {
                            let row = ((gx * side + x) * d[1] + gy * side + y) * d[2] + gz * side;
                            data.extend_from_slice(&ch[row..row + side]);
                        }
                    }
                }
                tiles.push(FeatureMap {
                    data,
                    channels: map.channels,
                    dims: [side; 3],
                });
            }
        }
    }
    Ok(tiles)
}

/// Inverse of [`tile_map`].
pub fn untile_map(tiles: &[FeatureMap], dims: Dims, side: usize) -> Result<FeatureMap> {
    let grid = tile_grid(dims, side)?;
    if tiles.len() != voxel_count(grid) {
        return Err(Error::Shape(format!(
            "{} tiles cannot fill a {grid:?} grid",
            tiles.len()
        )));
    }
    let channels = tiles[0].channels;
    if tiles
        .iter()
        .any(|t| t.channels != channels || t.dims != [side; 3])
    {
        return Err(Error::Shape("tiles differ in channels or size".into()));
    }
    let mut out = FeatureMap::zeros(channels, dims);
    let n = voxel_count(dims);
    let tile_n = side * side * side;
    let mut i = 0;
    for gx in 0..grid[0] {
        for gy in 0..grid[1] {
            for gz in 0..grid[2] {
                let t = &tiles[i];
                i += 1;
                for c in 0..channels {
                    for x in 0..side {
                        for y in 0..side {
                            let row =
                                ((gx * side + x) * dims[1] + gy * side + y) * dims[2] + gz * side;
                            let src = c * tile_n + (x * side + y) * side;
                            out.data[c * n + row..c * n + row + side]
                                .copy_from_slice(&t.data[src..src + side]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn tile_volume(volume: &Volume, side: usize) -> Result<Vec<Volume>> {
    Ok(tile_map(&volume.clone().into_feature_map(), side)?
        .into_iter()
        .map(|t| Volume {
            data: t.data,
            dims: t.dims,
        })
        .collect())
}

pub fn untile_volume(tiles: &[Volume], dims: Dims, side: usize) -> Result<Volume> {
    let maps: Vec<FeatureMap> = tiles.iter().map(|t| t.clone().into_feature_map()).collect();
    let m = untile_map(&maps, dims, side)?;
    Ok(Volume { data: m.data, dims })
}

pub const RAW_VOLUME_MAGIC: [u8; 4] = *b"DWCV";
pub const RAW_VOLUME_VERSION: u16 = 1;
const RAW_DTYPE_F32: u16 = 0;
/// magic (4) + version (2) + dtype (2) + three u32 dims (12).
pub const RAW_VOLUME_HEADER_LEN: usize = 20;

pub fn encode_raw_volume(volume: &Volume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(RAW_VOLUME_HEADER_LEN + 4 * volume.len());
    buf.extend_from_slice(&RAW_VOLUME_MAGIC);
    buf.extend_from_slice(&RAW_VOLUME_VERSION.to_le_bytes());
    buf.extend_from_slice(&RAW_DTYPE_F32.to_le_bytes());
    for d in volume.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &volume.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_raw_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let truncated = |context: &str| Error::Truncated {
        path: path.to_path_buf(),
        context: context.to_string(),
    };
    if bytes.len() < RAW_VOLUME_HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != RAW_VOLUME_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: RAW_VOLUME_MAGIC,
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(truncated("header"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != RAW_VOLUME_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: RAW_VOLUME_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != RAW_VOLUME_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: RAW_VOLUME_VERSION,
        });
    }
    let dtype = u16::from_le_bytes([bytes[6], bytes[7]]);
    if dtype != RAW_DTYPE_F32 {
        return Err(Error::InvalidInput(format!("unsupported dtype {dtype}")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 8 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    let n = voxel_count(dims);
    let body = &bytes[RAW_VOLUME_HEADER_LEN..];
    if body.len() < 4 * n {
        return Err(truncated("voxel data"));
    }
    if body.len() > 4 * n {
        return Err(Error::InvalidInput(format!(
            "{} trailing bytes after voxel data",
            body.len() - 4 * n
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(data, dims)
}

pub fn write_raw_volume(volume: &Volume, path: &Path) -> Result<()> {
    io_util::atomic_write(path, &encode_raw_volume(volume))
}

pub fn read_raw_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw_volume(&bytes, path)
}
