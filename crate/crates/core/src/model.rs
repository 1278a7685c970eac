//! The composed network: stem plus whichever branches the config enables.

use crate::appearance::{self, AppearanceOutput};
use crate::attribute::{self, AttributeOutput};
use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Init, Mode, ParamGroup, ParamStore, Session};
use crate::schema::AttributeSchema;
use crate::stem;
use crate::tensor::Tensor;

/// Images per forward pass when extracting descriptors or maps.
pub const EXTRACT_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub schema: AttributeSchema,
    pub num_ids: usize,
    pub store: ParamStore,
    mode: Mode,
}

/// Which branch outputs a forward pass should build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub attribute: bool,
    pub appearance: bool,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// Shared feature tensor `T [N, C_f, H_f, W_f]`.
    pub features: Var,
    pub attribute: Option<AttributeOutput>,
    pub appearance: Option<AppearanceOutput>,
}

impl Forward {
    /// `[f_app; f_att]` for whichever branches ran.
    pub fn descriptor(&self, s: &mut Session<'_>) -> Result<Var> {
        let parts: Vec<Var> = self
            .appearance
            .iter()
            .map(|a| a.feature)
            .chain(self.attribute.iter().map(|a| a.feature))
            .collect();
        s.tape.concat(&parts, 1)
    }
}

/// Runs the stem and the requested branches on `images [N, 3, H, W]`.
pub fn forward(cfg: &ModelConfig, schema: &AttributeSchema, s: &mut Session<'_>, images: Var, heads: Heads) -> Result<Forward> {
    if heads.attribute && !cfg.branches.has_attribute() || heads.appearance && !cfg.branches.has_appearance() {
        return Err(Error::Config(format!(
            "requested branches {heads:?} but the model is built with {}",
            cfg.branches.name()
        )));
    }
    let features = stem::forward(cfg, s, images)?;
    let attribute = if heads.attribute {
        Some(attribute::attribute_forward(cfg, schema, s, features)?)
    } else {
        None
    };
    let appearance = if heads.appearance {
        Some(appearance::appearance_forward(cfg, s, features)?)
    } else {
        None
    };
    Ok(Forward {
        features,
        attribute,
        appearance,
    })
}

impl Model {
    pub fn new(cfg: ModelConfig, schema: AttributeSchema, num_ids: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_ids == 0 {
            return Err(Error::Config("model needs at least one identity class".into()));
        }
        // one stream per group, so a branch's initial weights do not depend
        // on which other branches exist
        let mut store = ParamStore::new();
        stem::init(&cfg, &mut store, &mut Init::with_stream(seed, 1));
        if cfg.branches.has_attribute() {
            attribute::init(&cfg, &schema, &mut store, &mut Init::with_stream(seed, 2));
        }
        if cfg.branches.has_appearance() {
            appearance::init(&cfg, num_ids, &mut store, &mut Init::with_stream(seed, 3));
        }
        Ok(Model {
            cfg,
            schema,
            num_ids,
            store,
            mode: Mode::Train,
        })
    }

    /// Reassembles a model from stored parts after checking that `store`
    /// has exactly the parameters the config calls for.
    pub fn from_parts(cfg: ModelConfig, schema: AttributeSchema, num_ids: usize, store: ParamStore) -> Result<Self> {
        let reference = Model::new(cfg, schema, num_ids, 0)?;
        let diff = reference.store.shape_diff(&store);
        if !diff.is_empty() {
            return Err(Error::Incompatible(diff));
        }
        Ok(Model {
            store,
            mode: Mode::Eval,
            ..reference
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn descriptor_len(&self) -> usize {
        self.cfg.descriptor_len(self.schema.len())
    }

    /// Every head the configuration has.
    pub fn all_heads(&self) -> Heads {
        Heads {
            attribute: self.cfg.branches.has_attribute(),
            appearance: self.cfg.branches.has_appearance(),
        }
    }

    pub fn session(&mut self, trainable: &[ParamGroup]) -> Session<'_> {
        Session::new(&mut self.store, self.mode, trainable)
    }

    fn require_eval(&self) -> Result<()> {
        if self.mode != Mode::Eval {
            return Err(Error::Mode {
                expected: Mode::Eval.name(),
                actual: self.mode.name(),
            });
        }
        Ok(())
    }

    /// Descriptors `[N, D]` for `images [N, 3, H, W]`, computed with
    /// running batch-norm statistics. The model must be in eval mode.
    pub fn extract_descriptors(&mut self, images: &Tensor) -> Result<Tensor> {
        self.require_eval()?;
        let heads = self.all_heads();
        let dlen = self.descriptor_len();
        let mut out = Vec::with_capacity(images.shape()[0] * dlen);
        for chunk in split_batch(images, EXTRACT_CHUNK)? {
            let (cfg, schema) = (self.cfg.clone(), self.schema.clone());
            let mut s = self.session(&[]);
            let x = s.input(chunk);
            let f = forward(&cfg, &schema, &mut s, x, heads)?;
            let d = f.descriptor(&mut s)?;
            out.extend_from_slice(s.tape.value(d).data());
        }
        Tensor::new(&[images.shape()[0], dlen], out)
    }

    /// Most likely class per attribute, `[n][l]` in label order.
    pub fn predict_attributes(&mut self, images: &Tensor) -> Result<Vec<Vec<usize>>> {
        self.require_eval()?;
        if !self.cfg.branches.has_attribute() {
            return Err(Error::Config("model has no attribute branch".into()));
        }
        let heads = Heads {
            attribute: true,
            appearance: false,
        };
        let mut out = Vec::new();
        for chunk in split_batch(images, EXTRACT_CHUNK)? {
            let n = chunk.shape()[0];
            let (cfg, schema) = (self.cfg.clone(), self.schema.clone());
            let mut s = self.session(&[]);
            let x = s.input(chunk);
            let f = forward(&cfg, &schema, &mut s, x, heads)?;
            let att = f.attribute.expect("attribute head requested");
            let mut rows = vec![Vec::with_capacity(att.logits.len()); n];
            for z in &att.logits {
                let t = s.tape.value(*z);
                let m = t.shape()[1];
                for (row, logits) in rows.iter_mut().zip(t.data().chunks(m)) {
                    let best = (0..m).fold(0, |b, j| if logits[j] > logits[b] { j } else { b });
                    row.push(best);
                }
            }
            out.extend(rows);
        }
        Ok(out)
    }

    /// Normalised attention maps in label order, each `[N, H_f, W_f]`.
    pub fn attention_maps(&mut self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.require_eval()?;
        if !self.cfg.branches.has_attribute() {
            return Err(Error::Config("model has no attribute branch".into()));
        }
        let heads = Heads {
            attribute: true,
            appearance: false,
        };
        let (hf, wf) = (self.cfg.feature_height(), self.cfg.feature_width());
        let mut maps: Vec<Vec<f64>> = vec![Vec::new(); self.schema.len()];
        for chunk in split_batch(images, EXTRACT_CHUNK)? {
            let (cfg, schema) = (self.cfg.clone(), self.schema.clone());
            let mut s = self.session(&[]);
            let x = s.input(chunk);
            let f = forward(&cfg, &schema, &mut s, x, heads)?;
            let att = f.attribute.expect("attribute head requested");
            for (l, z) in att.maps.iter().enumerate() {
                maps[l].extend_from_slice(s.tape.value(*z).data());
            }
        }
        let n = images.shape()[0];
        maps.into_iter().map(|m| Tensor::new(&[n, hf, wf], m)).collect()
    }
}

/// Splits `[N, ...]` into consecutive chunks of at most `size` samples.
pub fn split_batch(t: &Tensor, size: usize) -> Result<Vec<Tensor>> {
    let shape = t.shape();
    if shape.is_empty() {
        return Err(Error::Shape {
            op: "split_batch",
            detail: "scalar has no batch axis".into(),
        });
    }
    let per: usize = shape[1..].iter().product();
    t.data()
        .chunks(size * per)
        .map(|c| {
            let mut s = shape.to_vec();
            s[0] = c.len() / per;
            Tensor::new(&s, c.to_vec())
        })
        .collect()
}
