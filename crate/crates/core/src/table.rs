//! Tab-separated tables shared by the stage outputs.

use std::io::{Read, Write};

use crate::error::CoreError;

pub(crate) fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().delimiter(b'\t').from_writer(out)
}

pub(crate) fn reader<R: Read>(src: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().delimiter(b'\t').trim(csv::Trim::All).from_reader(src)
}

pub(crate) fn err(e: csv::Error) -> CoreError {
    CoreError::Invalid(e.to_string())
}
