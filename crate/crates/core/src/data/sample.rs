use crate::binmap::{BinMap, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(u32),
    MultiHot(Vec<f32>),
}

impl Label {
    pub fn class(&self) -> Option<u32> {
        match self {
            Label::Class(c) => Some(*c),
            Label::MultiHot(_) => None,
        }
    }
}

/// One paired clip: `T` RGB frames `[T, H, W, 3]` and `T` frame-aligned
/// spectrogram segments `[T, mel_bins, seg_frames]`, both row-major f32.
#[derive(Debug, Clone, PartialEq)]
pub struct AVSample {
    pub sample_id: String,
    pub frames: Vec<f32>,
    pub frames_shape: [usize; 4],
    pub segments: Vec<f32>,
    pub segments_shape: [usize; 3],
    pub label: Option<Label>,
    /// Latent classes recorded by the synthetic generator.
    pub visual_class: Option<u32>,
    pub audio_class: Option<u32>,
}

impl AVSample {
    pub fn new(
        sample_id: impl Into<String>,
        frames: Vec<f32>,
        frames_shape: [usize; 4],
        segments: Vec<f32>,
        segments_shape: [usize; 3],
        label: Option<Label>,
    ) -> Result<Self> {
        let s = Self {
            sample_id: sample_id.into(),
            frames,
            frames_shape,
            segments,
            segments_shape,
            label,
            visual_class: None,
            audio_class: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let [t, h, w, c] = self.frames_shape;
        let [ta, m, f] = self.segments_shape;
        if c != 3 {
            return Err(Error::Data(format!(
                "{}: frames must have 3 channels, got {c}",
                self.sample_id
            )));
        }
        if t != ta {
            return Err(Error::Data(format!(
                "{}: {t} frames but {ta} audio segments",
                self.sample_id
            )));
        }
        if t == 0 {
            return Err(Error::Data(format!("{}: empty clip", self.sample_id)));
        }
        if self.frames.len() != t * h * w * c || self.segments.len() != ta * m * f {
            return Err(Error::Data(format!(
                "{}: array length does not match its shape",
                self.sample_id
            )));
        }
        if let Some(pos) = self.segments.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "{}: non-finite spectrogram value at flat index {pos}",
                self.sample_id
            )));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames_shape[0]
    }

    /// Frame `t` as `[H, W, 3]`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frames_shape[1] * self.frames_shape[2] * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    /// Segment `t` as `[mel_bins, seg_frames]`.
    pub fn segment(&self, t: usize) -> &[f32] {
        let n = self.segments_shape[1] * self.segments_shape[2];
        &self.segments[t * n..(t + 1) * n]
    }

    pub fn to_map(&self) -> BinMap {
        let mut m = BinMap::new();
        m.insert("id", Value::Str(self.sample_id.clone()));
        m.insert_f32("frames", &self.frames_shape, self.frames.clone());
        m.insert_f32("segments", &self.segments_shape, self.segments.clone());
        match &self.label {
            Some(Label::Class(c)) => m.insert("label", Value::U32List(vec![*c])),
            Some(Label::MultiHot(v)) => m.insert_f32("label_multi", &[v.len()], v.clone()),
            None => {}
        }
        if let Some(c) = self.visual_class {
            m.insert("visual_class", Value::U32List(vec![c]));
        }
        if let Some(c) = self.audio_class {
            m.insert("audio_class", Value::U32List(vec![c]));
        }
        m
    }

    pub fn from_map(m: &BinMap) -> Result<Self> {
        let sample_id = m.str("id")?.to_string();
        let (fs, frames) = m.f32s("frames")?;
        let (ss, segments) = m.f32s("segments")?;
        let frames_shape: [usize; 4] = fs
            .try_into()
            .map_err(|_| Error::Format(format!("{sample_id}: frames must be rank 4")))?;
        let segments_shape: [usize; 3] = ss
            .try_into()
            .map_err(|_| Error::Format(format!("{sample_id}: segments must be rank 3")))?;
        let single = |name: &str| -> Result<Option<u32>> {
            match m.get(name) {
                None => Ok(None),
                Some(_) => match m.u32s(name)? {
                    [c] => Ok(Some(*c)),
                    _ => Err(Error::Format(format!("{sample_id}: `{name}` must hold one value"))),
                },
            }
        };
        let label = if let Some(c) = single("label")? {
            Some(Label::Class(c))
        } else if m.get("label_multi").is_some() {
            Some(Label::MultiHot(m.f32s("label_multi")?.1.to_vec()))
        } else {
            None
        };
        let s = Self {
            frames: frames.to_vec(),
            segments: segments.to_vec(),
            frames_shape,
            segments_shape,
            label,
            visual_class: single("visual_class")?,
            audio_class: single("audio_class")?,
            sample_id,
        };
        s.validate()?;
        Ok(s)
    }
}
