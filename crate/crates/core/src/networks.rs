//! The five networks: identity encoder I, attribute encoder A, generator G,
//! classifier C and discriminator D.
//!
//! I and C are built on one convolutional trunk that is stored once in
//! [`ModelState`]. I reads its identity vector off the trunk's embedding
//! layer and adds a linear classification head; C continues from the same
//! embedding through a hidden fully-connected layer (whose output is the
//! feature `f_C`) to its own classification head. Any write to the trunk is
//! therefore seen by both networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, BatchNorm, Conv2d, Layer, Linear, Mode, Stack, Tape};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Output channels of each stride-2 convolution stage.
    pub stages: Vec<usize>,
    pub normalization: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Width of the latent code the generator accepts.
    pub input_width: usize,
    /// Channels of the seed feature map produced by the input projection.
    pub base_channels: usize,
    /// Output channels of each upsample+convolution stage before the final
    /// image stage (which always outputs the image channels).
    pub stages: Vec<usize>,
    pub normalization: bool,
}

impl GeneratorSpec {
    pub fn upsampling_factor(&self) -> usize {
        1 << (self.stages.len() + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    /// Output channels of each stride-2 4×4 convolution stage.
    pub stages: Vec<usize>,
    pub normalization: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub image_size: usize,
    pub channels: usize,
    pub num_identities: usize,
    pub identity_dim: usize,
    pub attribute_dim: usize,
    pub classifier_hidden: usize,
    pub encoder: EncoderSpec,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            image_size: 32,
            channels: 3,
            num_identities: 20,
            identity_dim: 64,
            attribute_dim: 128,
            classifier_hidden: 128,
            encoder: EncoderSpec {
                stages: vec![16, 32, 64, 128],
                normalization: true,
            },
            generator: GeneratorSpec {
                input_width: 192,
                base_channels: 128,
                stages: vec![64, 32, 16],
                normalization: true,
            },
            discriminator: DiscriminatorSpec {
                stages: vec![16, 32, 64, 128],
                normalization: true,
            },
        }
    }
}

impl ArchitectureConfig {
    pub fn latent_width(&self) -> usize {
        self.identity_dim + self.attribute_dim
    }

    pub fn image_shape(&self, n: usize) -> [usize; 4] {
        [n, self.channels, self.image_size, self.image_size]
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("num_identities", self.num_identities),
            ("identity_dim", self.identity_dim),
            ("attribute_dim", self.attribute_dim),
            ("classifier_hidden", self.classifier_hidden),
            ("generator.base_channels", self.generator.base_channels),
        ];
        for (name, v) in nonzero {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.generator.input_width != self.latent_width() {
            return Err(Error::config(format!(
                "generator input width {} != identity_dim + attribute_dim = {}",
                self.generator.input_width,
                self.latent_width()
            )));
        }
        let f = self.generator.upsampling_factor();
        if self.image_size % f != 0 {
            return Err(Error::config(format!(
                "image size {} is not a multiple of the generator upsampling factor {f}",
                self.image_size
            )));
        }
        for (name, stages) in [
            ("encoder", &self.encoder.stages),
            ("discriminator", &self.discriminator.stages),
        ] {
            if stages.is_empty() || stages.contains(&0) {
                return Err(Error::config(format!("{name} stages must be non-empty and positive")));
            }
            if self.image_size >> stages.len() == 0 {
                return Err(Error::config(format!(
                    "{name} with {} stride-2 stages collapses a {}px image",
                    stages.len(),
                    self.image_size
                )));
            }
        }
        if self.generator.stages.contains(&0) {
            return Err(Error::config("generator stages must be positive"));
        }
        Ok(())
    }
}

/// The five networks. I and C alias the shared trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Net {
    I,
    A,
    G,
    C,
    D,
}

impl Net {
    pub const ALL: [Net; 5] = [Net::I, Net::A, Net::G, Net::C, Net::D];

    /// Parameter groups owned by (or shared into) this network.
    pub fn parts(self) -> &'static [Part] {
        match self {
            Net::I => &[Part::Trunk, Part::IdentityHead],
            Net::C => &[Part::Trunk, Part::ClassifierBody, Part::ClassifierHead],
            Net::A => &[Part::Attribute],
            Net::G => &[Part::Generator],
            Net::D => &[Part::DiscriminatorBody, Part::DiscriminatorHead],
        }
    }
}

/// Physically stored parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Part {
    Trunk,
    IdentityHead,
    ClassifierBody,
    ClassifierHead,
    Attribute,
    Generator,
    DiscriminatorBody,
    DiscriminatorHead,
}

impl Part {
    pub const ALL: [Part; 8] = [
        Part::Trunk,
        Part::IdentityHead,
        Part::ClassifierBody,
        Part::ClassifierHead,
        Part::Attribute,
        Part::Generator,
        Part::DiscriminatorBody,
        Part::DiscriminatorHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Part::Trunk => "trunk",
            Part::IdentityHead => "identity_head",
            Part::ClassifierBody => "classifier_body",
            Part::ClassifierHead => "classifier_head",
            Part::Attribute => "attribute",
            Part::Generator => "generator",
            Part::DiscriminatorBody => "discriminator_body",
            Part::DiscriminatorHead => "discriminator_head",
        }
    }
}

/// Identity vectors `f_I`, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityVectors<T>(pub Tensor<T>);

/// Mean and log-variance of the attribute posterior, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeDistribution<T> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
}

/// Generator input laid out as `[identity ; attribute]` per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub values: Tensor<T>,
    pub identity_dim: usize,
}

impl<T: Scalar> LatentCode<T> {
    pub fn new(identity: &Tensor<T>, attribute: &Tensor<T>) -> Result<Self> {
        Ok(LatentCode {
            values: Tensor::concat_cols(identity, attribute)?,
            identity_dim: identity.row_len(),
        })
    }

    pub fn width(&self) -> usize {
        self.values.row_len()
    }

    pub fn identity(&self) -> Tensor<T> {
        self.values.split_cols(self.identity_dim).0
    }

    pub fn attribute(&self) -> Tensor<T> {
        self.values.split_cols(self.identity_dim).1
    }
}

/// Per-network optimizer state, in [`Net::ALL`] order.
#[derive(Clone, Debug)]
pub struct Optimizers<T> {
    pub nets: Vec<(Net, Adam<T>)>,
}

impl<T: Scalar> Optimizers<T> {
    pub fn get_mut(&mut self, net: Net) -> &mut Adam<T> {
        &mut self.nets.iter_mut().find(|(n, _)| *n == net).expect("all nets present").1
    }

    pub fn get(&self, net: Net) -> &Adam<T> {
        &self.nets.iter().find(|(n, _)| *n == net).expect("all nets present").1
    }
}

#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub config: ArchitectureConfig,
    pub trunk: Stack<T>,
    pub identity_head: Stack<T>,
    pub classifier_body: Stack<T>,
    pub classifier_head: Stack<T>,
    pub attribute: Stack<T>,
    pub generator: Stack<T>,
    pub discriminator_body: Stack<T>,
    pub discriminator_head: Stack<T>,
    pub optimizers: Optimizers<T>,
    /// Completed training steps.
    pub step: u64,
}

fn encoder_layers<T: Scalar, R: Rng + ?Sized>(
    spec: &EncoderSpec,
    channels: usize,
    image_size: usize,
    out_width: usize,
    rng: &mut R,
) -> Vec<Layer<T>> {
    let mut layers = vec![];
    let mut c_in = channels;
    for &c in &spec.stages {
        layers.push(Layer::Conv(Conv2d::new(c_in, c, 3, 2, 1, INIT_STD, rng)));
        if spec.normalization {
            layers.push(Layer::Norm(BatchNorm::new(c)));
        }
        layers.push(Layer::LeakyRelu(LEAK));
        c_in = c;
    }
    let side = image_size >> spec.stages.len();
    layers.push(Layer::Flatten);
    layers.push(Layer::Linear(Linear::new(c_in * side * side, out_width, INIT_STD, rng)));
    layers
}

/// Build all five networks with fresh weights drawn from `rng`.
pub fn build_networks<T: Scalar, R: Rng + ?Sized>(
    config: &ArchitectureConfig,
    adam: AdamConfig,
    rng: &mut R,
) -> Result<ModelState<T>> {
    config.validate()?;
    let c = config;
    let trunk = Stack::new(
        Part::Trunk.name(),
        encoder_layers(&c.encoder, c.channels, c.image_size, c.identity_dim, rng),
    );
    let identity_head = Stack::new(
        Part::IdentityHead.name(),
        vec![Layer::Linear(Linear::new(c.identity_dim, c.num_identities, INIT_STD, rng))],
    );
    let classifier_body = Stack::new(
        Part::ClassifierBody.name(),
        vec![
            Layer::Linear(Linear::new(c.identity_dim, c.classifier_hidden, INIT_STD, rng)),
            Layer::LeakyRelu(LEAK),
        ],
    );
    let classifier_head = Stack::new(
        Part::ClassifierHead.name(),
        vec![Layer::Linear(Linear::new(c.classifier_hidden, c.num_identities, INIT_STD, rng))],
    );
    let attribute = Stack::new(
        Part::Attribute.name(),
        encoder_layers(&c.encoder, c.channels, c.image_size, 2 * c.attribute_dim, rng),
    );

    let g = &c.generator;
    let base = c.image_size / g.upsampling_factor();
    let mut gl = vec![
        Layer::Linear(Linear::new(g.input_width, g.base_channels * base * base, INIT_STD, rng)),
        Layer::Unflatten {
            channels: g.base_channels,
            height: base,
            width: base,
        },
    ];
    if g.normalization {
        gl.push(Layer::Norm(BatchNorm::new(g.base_channels)));
    }
    gl.push(Layer::Relu);
    let mut c_in = g.base_channels;
    for &ch in &g.stages {
        gl.push(Layer::Upsample2x);
        gl.push(Layer::Conv(Conv2d::new(c_in, ch, 3, 1, 1, INIT_STD, rng)));
        if g.normalization {
            gl.push(Layer::Norm(BatchNorm::new(ch)));
        }
        gl.push(Layer::Relu);
        c_in = ch;
    }
    gl.push(Layer::Upsample2x);
    gl.push(Layer::Conv(Conv2d::new(c_in, c.channels, 3, 1, 1, INIT_STD, rng)));
    gl.push(Layer::Tanh);
    let generator = Stack::new(Part::Generator.name(), gl);

    let d = &c.discriminator;
    let mut dl = vec![];
    let mut c_in = c.channels;
    for (i, &ch) in d.stages.iter().enumerate() {
        dl.push(Layer::Conv(Conv2d::new(c_in, ch, 4, 2, 1, INIT_STD, rng)));
        if d.normalization && i > 0 {
            dl.push(Layer::Norm(BatchNorm::new(ch)));
        }
        dl.push(Layer::LeakyRelu(LEAK));
        c_in = ch;
    }
    dl.push(Layer::Flatten);
    let side = c.image_size >> d.stages.len();
    let discriminator_body = Stack::new(Part::DiscriminatorBody.name(), dl);
    let discriminator_head = Stack::new(
        Part::DiscriminatorHead.name(),
        vec![
            Layer::Linear(Linear::new(c_in * side * side, 1, INIT_STD, rng)),
            Layer::Sigmoid,
        ],
    );

    let mut state = ModelState {
        config: c.clone(),
        trunk,
        identity_head,
        classifier_body,
        classifier_head,
        attribute,
        generator,
        discriminator_body,
        discriminator_head,
        optimizers: Optimizers { nets: vec![] },
        step: 0,
    };
    state.optimizers = Optimizers {
        nets: Net::ALL
            .iter()
            .map(|&n| (n, Adam::new(adam, &state.param_sizes(n))))
            .collect(),
    };
    // Catch inconsistent stage lists early.
    state.generator.output_shape(&[1, g.input_width])?;
    state.discriminator_head.output_shape(&[1, c_in * side * side])?;
    Ok(state)
}

impl<T: Scalar> ModelState<T> {
    pub fn part(&self, p: Part) -> &Stack<T> {
        match p {
            Part::Trunk => &self.trunk,
            Part::IdentityHead => &self.identity_head,
            Part::ClassifierBody => &self.classifier_body,
            Part::ClassifierHead => &self.classifier_head,
            Part::Attribute => &self.attribute,
            Part::Generator => &self.generator,
            Part::DiscriminatorBody => &self.discriminator_body,
            Part::DiscriminatorHead => &self.discriminator_head,
        }
    }

    pub fn part_mut(&mut self, p: Part) -> &mut Stack<T> {
        match p {
            Part::Trunk => &mut self.trunk,
            Part::IdentityHead => &mut self.identity_head,
            Part::ClassifierBody => &mut self.classifier_body,
            Part::ClassifierHead => &mut self.classifier_head,
            Part::Attribute => &mut self.attribute,
            Part::Generator => &mut self.generator,
            Part::DiscriminatorBody => &mut self.discriminator_body,
            Part::DiscriminatorHead => &mut self.discriminator_head,
        }
    }

    fn param_sizes(&self, net: Net) -> Vec<usize> {
        net.parts()
            .iter()
            .flat_map(|&p| self.part(p).param_slices().into_iter().map(|(_, v)| v.len()))
            .collect()
    }

    /// Concatenated parameter values of a network, for snapshots and comparisons.
    pub fn net_params(&self, net: Net) -> Vec<T> {
        net.parts()
            .iter()
            .flat_map(|&p| {
                self.part(p)
                    .param_slices()
                    .into_iter()
                    .flat_map(|(_, v)| v.to_vec())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Apply one optimizer step to `net` given per-part gradients in
    /// [`Net::parts`] order.
    pub fn apply_update(&mut self, net: Net, grads: &[crate::nn::Grads<T>]) {
        let parts = net.parts();
        assert_eq!(parts.len(), grads.len());
        let flat: Vec<&[T]> = grads.iter().flat_map(|g| g.iter().map(|v| v.as_slice())).collect();
        let mut adam = std::mem::replace(self.optimizers.get_mut(net), Adam::new(AdamConfig::default(), &[]));
        {
            let mut params: Vec<&mut Vec<T>> = vec![];
            // Each part is borrowed once per network; parts of one network are distinct.
            let ModelState {
                trunk,
                identity_head,
                classifier_body,
                classifier_head,
                attribute,
                generator,
                discriminator_body,
                discriminator_head,
                ..
            } = self;
            let mut slots: Vec<(Part, &mut Stack<T>)> = vec![
                (Part::Trunk, trunk),
                (Part::IdentityHead, identity_head),
                (Part::ClassifierBody, classifier_body),
                (Part::ClassifierHead, classifier_head),
                (Part::Attribute, attribute),
                (Part::Generator, generator),
                (Part::DiscriminatorBody, discriminator_body),
                (Part::DiscriminatorHead, discriminator_head),
            ];
            for p in parts {
                let pos = slots.iter().position(|(q, _)| q == p).expect("part present");
                let (_, stack) = slots.swap_remove(pos);
                params.extend(stack.params_mut());
            }
            adam.update(params, &flat);
        }
        *self.optimizers.get_mut(net) = adam;
    }

    pub fn check_images(&self, x: &Tensor<T>) -> Result<()> {
        let n = x.rows();
        x.expect_shape(&self.config.image_shape(n))?;
        if n == 0 {
            return Err(Error::validation("empty image batch"));
        }
        Ok(())
    }

    /// Trunk pass yielding `f_I` and the tape.
    pub(crate) fn trunk_pass(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Tape<T>) {
        self.trunk.forward(x.clone(), mode)
    }

    /// I: identity vectors and I's class logits. Evaluation mode.
    pub fn forward_identity(&self, x: &Tensor<T>) -> Result<(IdentityVectors<T>, Tensor<T>)> {
        self.check_images(x)?;
        let (f, _) = self.trunk_pass(x, Mode::Eval);
        let (logits, _) = self.identity_head.forward(f.clone(), Mode::Eval);
        Ok((IdentityVectors(f), logits))
    }

    /// A: posterior mean and log-variance. Evaluation mode.
    pub fn forward_attribute(&self, x: &Tensor<T>) -> Result<AttributeDistribution<T>> {
        self.check_images(x)?;
        let (out, _) = self.attribute.forward(x.clone(), Mode::Eval);
        Ok(split_attribute(&out, self.config.attribute_dim))
    }

    /// G: images in [-1, 1]. Evaluation mode.
    pub fn generate(&self, code: &LatentCode<T>) -> Result<Tensor<T>> {
        if code.values.shape().len() != 2 || code.width() != self.config.generator.input_width {
            return Err(Error::Shape {
                expected: vec![code.values.rows(), self.config.generator.input_width],
                actual: code.values.shape().to_vec(),
            });
        }
        let (x, _) = self.generator.forward(code.values.clone(), Mode::Eval);
        Ok(x)
    }

    /// D: probability of "real" (n×1) and the features `f_D`. Evaluation mode.
    pub fn discriminate(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_images(x)?;
        let (f, _) = self.discriminator_body.forward(x.clone(), Mode::Eval);
        let (p, _) = self.discriminator_head.forward(f.clone(), Mode::Eval);
        Ok((p, f))
    }

    /// C: class logits and the features `f_C`. Evaluation mode.
    pub fn classify(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_images(x)?;
        let (f_i, _) = self.trunk_pass(x, Mode::Eval);
        let (f_c, _) = self.classifier_body.forward(f_i, Mode::Eval);
        let (logits, _) = self.classifier_head.forward(f_c.clone(), Mode::Eval);
        Ok((logits, f_c))
    }

    /// `f_C` together with the tapes needed to backpropagate into the image.
    pub(crate) fn classifier_features(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, [Tape<T>; 2]) {
        let (f_i, t0) = self.trunk_pass(x, mode);
        let (f_c, t1) = self.classifier_body.forward(f_i, mode);
        (f_c, [t0, t1])
    }

    /// Gradient of a loss w.r.t. the input image, given its gradient w.r.t. `f_C`.
    pub(crate) fn classifier_features_input_grad(&self, tapes: &[Tape<T>; 2], d_fc: Tensor<T>) -> Tensor<T> {
        let d_fi = self
            .classifier_body
            .backward(&tapes[1], d_fc, None, true)
            .expect("input grad requested");
        self.trunk.backward(&tapes[0], d_fi, None, true).expect("input grad requested")
    }

    /// Convert every parameter and buffer to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        fn cast_stack<T: Scalar, U: Scalar>(s: &Stack<T>) -> Stack<U> {
            let layers = s
                .layers
                .iter()
                .map(|l| {
                    let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64c(x.as_f64())).collect::<Vec<U>>();
                    match l {
                        Layer::Conv(k) => Layer::Conv(Conv2d {
                            in_channels: k.in_channels,
                            out_channels: k.out_channels,
                            kernel: k.kernel,
                            stride: k.stride,
                            padding: k.padding,
                            weight: c(&k.weight),
                            bias: c(&k.bias),
                        }),
                        Layer::Norm(b) => Layer::Norm(BatchNorm {
                            channels: b.channels,
                            gamma: c(&b.gamma),
                            beta: c(&b.beta),
                            running_mean: c(&b.running_mean),
                            running_var: c(&b.running_var),
                            momentum: b.momentum,
                            eps: b.eps,
                        }),
                        Layer::Linear(k) => Layer::Linear(Linear {
                            in_features: k.in_features,
                            out_features: k.out_features,
                            weight: c(&k.weight),
                            bias: c(&k.bias),
                        }),
                        Layer::LeakyRelu(s) => Layer::LeakyRelu(*s),
                        Layer::Relu => Layer::Relu,
                        Layer::Tanh => Layer::Tanh,
                        Layer::Sigmoid => Layer::Sigmoid,
                        Layer::Upsample2x => Layer::Upsample2x,
                        Layer::Flatten => Layer::Flatten,
                        Layer::Unflatten { channels, height, width } => Layer::Unflatten {
                            channels: *channels,
                            height: *height,
                            width: *width,
                        },
                    }
                })
                .collect();
            Stack::new(s.name.clone(), layers)
        }
        let opt = |a: &Adam<T>| Adam {
            config: a.config,
            step: a.step,
            m: a.m.iter().map(|v| v.iter().map(|x| U::from_f64c(x.as_f64())).collect()).collect(),
            v: a.v.iter().map(|v| v.iter().map(|x| U::from_f64c(x.as_f64())).collect()).collect(),
        };
        ModelState {
            config: self.config.clone(),
            trunk: cast_stack(&self.trunk),
            identity_head: cast_stack(&self.identity_head),
            classifier_body: cast_stack(&self.classifier_body),
            classifier_head: cast_stack(&self.classifier_head),
            attribute: cast_stack(&self.attribute),
            generator: cast_stack(&self.generator),
            discriminator_body: cast_stack(&self.discriminator_body),
            discriminator_head: cast_stack(&self.discriminator_head),
            optimizers: Optimizers {
                nets: self.optimizers.nets.iter().map(|(n, a)| (*n, opt(a))).collect(),
            },
            step: self.step,
        }
    }
}

pub(crate) fn split_attribute<T: Scalar>(out: &Tensor<T>, d_a: usize) -> AttributeDistribution<T> {
    let (mu, log_var) = out.split_cols(d_a);
    AttributeDistribution { mu, log_var }
}
