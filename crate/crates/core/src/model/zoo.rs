//! Built-in network descriptions used by tests, fixtures and the CLI.

use super::{LayerKind, LayerSpec, NetworkSpec, Shape3};

struct Builder {
    shape: Shape3,
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn new(input: Shape3) -> Self {
        Self { shape: input, layers: Vec::new() }
    }

    fn push(&mut self, kind: LayerKind, kernel: usize, stride: usize, padding: usize, out: usize, bn: bool) {
        let l = LayerSpec {
            kind,
            kernel,
            stride,
            in_channels: self.shape.channels,
            out_channels: out,
            in_height: self.shape.height,
            in_width: self.shape.width,
            padding,
            has_bn: bn,
            has_relu: bn,
        };
        self.shape = l.out_shape();
        self.layers.push(l);
    }

    fn conv(&mut self, k: usize, s: usize, out: usize) {
        self.push(LayerKind::Conv, k, s, k / 2, out, true);
    }

    fn dw(&mut self, s: usize) {
        let c = self.shape.channels;
        self.push(LayerKind::DepthwiseConv, 3, s, 1, c, true);
    }

    fn pw(&mut self, out: usize) {
        self.push(LayerKind::PointwiseConv, 1, 1, 0, out, true);
    }

    fn global_pool(&mut self) {
        let c = self.shape.channels;
        let k = self.shape.height;
        assert_eq!(k, self.shape.width, "global pooling expects a square map");
        self.push(LayerKind::AvgPool, k, 1, 0, c, false);
    }

    fn fc(&mut self, out: usize) {
        self.push(LayerKind::FullyConnected, 1, 1, 0, out, false);
    }

    fn finish(self, name: &str, input: Shape3, classes: usize) -> NetworkSpec {
        NetworkSpec::new(name, input, classes, self.layers).expect("zoo network is well formed")
    }
}

/// MobileNet-V1 with the 21 pipeline rows of the unroll table (the repeated
/// 512-channel block appears once). `resolution` must be a multiple of 32
/// for every stride-2 stage to halve exactly; other sizes still chain.
pub fn mobilenet_v1(resolution: usize) -> NetworkSpec {
    mobilenet(resolution, 1, "mobilenet_v1")
}

/// MobileNet-V1 at full depth: the 512-channel block repeated five times,
/// 29 pipeline rows.
pub fn mobilenet_v1_full(resolution: usize) -> NetworkSpec {
    mobilenet(resolution, 5, "mobilenet_v1_full")
}

fn mobilenet(resolution: usize, repeats: usize, name: &str) -> NetworkSpec {
    let input = Shape3::new(resolution, resolution, 3);
    let mut b = Builder::new(input);
    b.conv(3, 2, 32);
    b.dw(1);
    b.pw(64);
    b.dw(2);
    b.pw(128);
    b.dw(1);
    b.pw(128);
    b.dw(2);
    b.pw(256);
    b.dw(1);
    b.pw(256);
    b.dw(2);
    b.pw(512);
    for _ in 0..repeats {
        b.dw(1);
        b.pw(512);
    }
    b.dw(2);
    b.pw(1024);
    b.dw(1);
    b.pw(1024);
    b.global_pool();
    b.fc(1000);
    b.finish(name, input, 1000)
}

/// Single 1×1 convolution with one weight per channel pair and no batch norm.
pub fn identity(height: usize, width: usize, channels: usize) -> NetworkSpec {
    let input = Shape3::new(height, width, channels);
    let mut b = Builder::new(input);
    b.push(LayerKind::Conv, 1, 1, 0, channels, false);
    b.finish("identity", input, channels.max(1))
}

/// Same as [`identity`] but with a batch-norm stage.
pub fn identity_with_bn(height: usize, width: usize, channels: usize) -> NetworkSpec {
    let input = Shape3::new(height, width, channels);
    let mut b = Builder::new(input);
    b.push(LayerKind::Conv, 1, 1, 0, channels, true);
    b.finish("identity_bn", input, channels.max(1))
}

/// Two parameterized layers: a 3×3 convolution collapsing a 3×3 map, then a
/// classifier. Small enough for exhaustive search comparisons.
pub fn toy_two_layer(in_channels: usize, hidden: usize, classes: usize) -> NetworkSpec {
    let input = Shape3::new(3, 3, in_channels);
    let mut b = Builder::new(input);
    b.push(LayerKind::Conv, 3, 1, 0, hidden, true);
    b.fc(classes);
    b.finish("toy2", input, classes)
}

/// Single fully connected layer over a 1×1 map.
pub fn linear(features: usize, classes: usize) -> NetworkSpec {
    let input = Shape3::new(1, 1, features);
    let mut b = Builder::new(input);
    b.fc(classes);
    b.finish("linear", input, classes)
}

/// Strided 3×3 convolution followed by a pointwise layer.
pub fn strided_pair(size: usize, in_channels: usize, mid: usize, out: usize) -> NetworkSpec {
    let input = Shape3::new(size, size, in_channels);
    let mut b = Builder::new(input);
    b.conv(3, 2, mid);
    b.pw(out);
    b.finish("strided_pair", input, out)
}

/// A small depthwise-separable classifier used as a fixture.
pub fn tiny_separable() -> NetworkSpec {
    let input = Shape3::new(8, 8, 3);
    let mut b = Builder::new(input);
    b.conv(3, 2, 8);
    b.dw(1);
    b.pw(16);
    b.global_pool();
    b.fc(4);
    b.finish("tiny_separable", input, 4)
}
