use std::collections::VecDeque;
use std::path::Path;

use super::{SampleFormat, SliceFilter};
use crate::error::{Error, Result};
use crate::job::JobControl;
use crate::volume::{Slice, SliceVolume, SliceWriter, VolumeMeta};

/// Ordered filters, the first applied first.
#[derive(Debug, Default)]
pub struct FilterStack {
    filters: Vec<Box<dyn SliceFilter>>,
}

/// Result of [`FilterStack::run`].
#[derive(Debug)]
pub struct StackRun {
    pub volume: SliceVolume,
    /// Largest number of input slices buffered across all stages at once.
    pub window_high_water: usize,
}

impl FilterStack {
    pub fn new(filters: Vec<Box<dyn SliceFilter>>) -> Self {
        FilterStack { filters }
    }

    pub fn push(&mut self, filter: Box<dyn SliceFilter>) {
        self.filters.push(filter);
    }

    pub fn filters(&self) -> &[Box<dyn SliceFilter>] {
        &self.filters
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// Sum of the stages' z extents, the bound on buffered slices.
    pub fn window_bound(&self) -> usize {
        self.filters.iter().map(|f| f.z_extent()).sum()
    }

    /// Per-stage formats; the last entry is the stack output.
    pub fn formats(&self, input: SampleFormat) -> Result<Vec<SampleFormat>> {
        let mut formats = vec![input];
        for f in &self.filters {
            let next = f.output_format(*formats.last().unwrap())?;
            formats.push(next);
        }
        Ok(formats)
    }

    pub fn output_meta(&self, input: &VolumeMeta) -> Result<VolumeMeta> {
        let out = *self
            .formats(SampleFormat {
                dtype: input.dtype,
                channels: input.channels,
            })?
            .last()
            .unwrap();
        let mut meta = input.clone();
        meta.dtype = out.dtype;
        meta.channels = out.channels;
        meta.value_range = None;
        Ok(meta)
    }

    /// Wraps a slice source (yielding slices `0..nz` in order) into a stream
    /// of output slices.
    pub fn stream<'a>(
        &'a self,
        meta: &VolumeMeta,
        source: impl Iterator<Item = Result<Slice>> + 'a,
    ) -> Result<StackStream<'a>> {
        let formats = self.formats(SampleFormat {
            dtype: meta.dtype,
            channels: meta.channels,
        })?;
        let stages = self
            .filters
            .iter()
            .enumerate()
            .map(|(i, f)| Stage {
                filter: f.as_ref(),
                input: formats[i],
                output: formats[i + 1],
                buf: VecDeque::new(),
                received: 0,
                next: 0,
            })
            .collect();
        Ok(StackStream {
            source: Box::new(source),
            stages,
            nz: meta.nz(),
            emitted: 0,
            held: 0,
            high_water: 0,
        })
    }

    /// Reads `src` once and writes the stack output once to `out`.
    pub fn run(&self, src: &SliceVolume, out: impl AsRef<Path>, job: Option<&JobControl>) -> Result<StackRun> {
        let meta = self.output_meta(src.meta())?;
        let nz = meta.nz();
        let mut writer = SliceWriter::create(meta, out)?;
        let mut stream = self.stream(src.meta(), src.reader()?)?;
        for k in 0..nz {
            if let Some(job) = job {
                job.check()?;
            }
            let slice = stream.next().expect("stream yields nz slices")?;
            writer.push(&slice)?;
            if let Some(job) = job {
                job.set_progress((k + 1) as f64 / nz as f64);
            }
        }
        Ok(StackRun {
            window_high_water: stream.high_water(),
            volume: writer.finish()?,
        })
    }
}

struct Stage<'a> {
    filter: &'a dyn SliceFilter,
    input: SampleFormat,
    output: SampleFormat,
    buf: VecDeque<(usize, Slice)>,
    received: usize,
    next: usize,
}

/// Pull-based evaluation: producing output `k` of a stage pulls its input up
/// to `k + r` and drops everything below `k - r`.
pub struct StackStream<'a> {
    source: Box<dyn Iterator<Item = Result<Slice>> + 'a>,
    stages: Vec<Stage<'a>>,
    nz: usize,
    emitted: usize,
    held: usize,
    high_water: usize,
}

impl StackStream<'_> {
    pub fn high_water(&self) -> usize {
        self.high_water
    }

    fn pull(&mut self, level: usize) -> Result<Slice> {
        if level == 0 {
            return self
                .source
                .next()
                .unwrap_or_else(|| Err(Error::Protocol("filter source ended early".into())));
        }
        let st = level - 1;
        let k = self.stages[st].next;
        let r = (self.stages[st].filter.z_extent() - 1) / 2;
        let lo = k.saturating_sub(r);
        let hi = (k + r).min(self.nz - 1);
        while self.stages[st].buf.front().is_some_and(|(z, _)| *z < lo) {
            self.stages[st].buf.pop_front();
            self.held -= 1;
        }
        while self.stages[st].received <= hi {
            let slice = self.pull(level - 1)?;
            let stage = &mut self.stages[st];
            stage.buf.push_back((stage.received, slice));
            stage.received += 1;
            self.held += 1;
            self.high_water = self.high_water.max(self.held);
        }
        let stage = &mut self.stages[st];
        let first = stage.buf.front().map(|(z, _)| *z).unwrap_or(0);
        let window: Vec<&Slice> = (0..2 * r + 1)
            .map(|i| {
                let z = (k + i).saturating_sub(r).min(self.nz - 1);
                &stage.buf[z - first].1
            })
            .collect();
        let mut out = stage.filter.apply(&window, stage.input)?;
        if out.channels != stage.output.channels || out.data.len() != window[0].plane_len() * out.channels {
            return Err(Error::ShapeMismatch(format!(
                "{} produced a slice of the wrong shape",
                stage.filter.name()
            )));
        }
        if stage.output.dtype.is_integer() {
            let dtype = stage.output.dtype;
            out.data.iter_mut().for_each(|v| *v = dtype.quantize(*v));
        }
        stage.next += 1;
        Ok(out)
    }
}

impl Iterator for StackStream<'_> {
    type Item = Result<Slice>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.emitted >= self.nz {
            return None;
        }
        self.emitted += 1;
        let level = self.stages.len();
        Some(self.pull(level))
    }
}
