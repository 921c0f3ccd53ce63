//! Map and update function contracts as seen by application code.
//!
//! Operator bodies never act on the world directly: publishes and slate
//! replacements are buffered in an [`EmitContext`] and handed back to the
//! runtime only when the body returns `Ok`.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::Event;
use crate::workflow::{FunctionDef, FunctionKind, Workflow};

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;
pub type OpResult = std::result::Result<(), BoxError>;

/// A memoryless operator. One instance is shared by every worker on a node,
/// so bodies must be reentrant.
pub trait MapFunction: Send + Sync {
    fn map(&self, ctx: &mut EmitContext<'_>, stream: &str, key: &[u8], value: &[u8]) -> OpResult;
}

/// A stateful operator whose only state is the per-key slate.
pub trait UpdateFunction: Send + Sync {
    fn update(
        &self,
        ctx: &mut EmitContext<'_>,
        stream: &str,
        key: &[u8],
        value: &[u8],
        slate: Option<&[u8]>,
    ) -> OpResult;

    /// Whether the runtime should deliver an end-of-stream event to each of
    /// this updater's slates after the input is exhausted.
    fn wants_end_of_stream(&self) -> bool {
        false
    }
}

impl<F> MapFunction for F
where
    F: Fn(&mut EmitContext<'_>, &str, &[u8], &[u8]) -> OpResult + Send + Sync,
{
    fn map(&self, ctx: &mut EmitContext<'_>, stream: &str, key: &[u8], value: &[u8]) -> OpResult {
        self(ctx, stream, key, value)
    }
}

impl<F> UpdateFunction for F
where
    F: Fn(&mut EmitContext<'_>, &str, &[u8], &[u8], Option<&[u8]>) -> OpResult + Send + Sync,
{
    fn update(
        &self,
        ctx: &mut EmitContext<'_>,
        stream: &str,
        key: &[u8],
        value: &[u8],
        slate: Option<&[u8]>,
    ) -> OpResult {
        self(ctx, stream, key, value, slate)
    }
}

#[derive(Clone)]
pub enum Operator {
    Map(Arc<dyn MapFunction>),
    Update(Arc<dyn UpdateFunction>),
}

impl Operator {
    pub fn kind(&self) -> FunctionKind {
        match self {
            Operator::Map(_) => FunctionKind::Map,
            Operator::Update(_) => FunctionKind::Update,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Publish {
    pub stream: String,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

/// Effect buffer for a single invocation.
pub struct EmitContext<'a> {
    input: &'a Event,
    function: &'a str,
    kind: FunctionKind,
    workflow: &'a Workflow,
    publishes: Vec<Publish>,
    slate: Option<Vec<u8>>,
}

impl<'a> EmitContext<'a> {
    pub fn new(input: &'a Event, def: &'a FunctionDef, workflow: &'a Workflow) -> Self {
        Self {
            input,
            function: &def.name,
            kind: def.kind,
            workflow,
            publishes: Vec::new(),
            slate: None,
        }
    }

    pub fn input(&self) -> &Event {
        self.input
    }

    pub fn function_name(&self) -> &str {
        self.function
    }

    pub fn publish(&mut self, stream: &str, key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Result<()> {
        self.workflow.check_publish(stream)?;
        self.publishes.push(Publish {
            stream: stream.to_string(),
            key: key.into(),
            value: value.into(),
        });
        Ok(())
    }

    /// Sets the slate this invocation leaves behind. Last call wins.
    pub fn replace_slate(&mut self, body: impl Into<Vec<u8>>) -> Result<()> {
        if self.kind == FunctionKind::Map {
            return Err(Error::SlateFromMap(self.function.to_string()));
        }
        self.slate = Some(body.into());
        Ok(())
    }

    pub fn pending_publishes(&self) -> &[Publish] {
        &self.publishes
    }

    /// Rewrites keys of publishes buffered at index `start` onward. `f`
    /// returns the new key, or `None` to keep the old one.
    pub fn rewrite_keys_from(&mut self, start: usize, f: impl Fn(&[u8], &[u8]) -> Option<Vec<u8>>) {
        for p in self.publishes.iter_mut().skip(start) {
            if let Some(k) = f(&p.key, &p.value) {
                p.key = k;
            }
        }
    }

    fn finish(self) -> InvocationResult {
        let publishes = self
            .publishes
            .into_iter()
            .enumerate()
            .map(|(pos, p)| self.input.emit(self.function, pos, p.stream, p.key, p.value))
            .collect();
        InvocationResult {
            publishes,
            slate_replacement: self.slate,
        }
    }
}

/// Effects of one successful invocation, with output timestamps stamped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InvocationResult {
    pub publishes: Vec<Event>,
    pub slate_replacement: Option<Vec<u8>>,
}

/// Runs `op` on `event`. A body that returns an error or panics yields
/// [`Error::Operator`] and none of its buffered effects.
pub fn invoke(
    op: &Operator,
    def: &FunctionDef,
    workflow: &Workflow,
    event: &Event,
    slate: Option<&[u8]>,
) -> Result<InvocationResult> {
    if !def.subscriptions.contains(&event.sid) {
        return Err(Error::Operator {
            function: def.name.clone(),
            message: format!("not subscribed to stream {}", event.sid),
        });
    }
    let mut ctx = EmitContext::new(event, def, workflow);
    let outcome = catch_unwind(AssertUnwindSafe(|| match op {
        Operator::Map(m) => m.map(&mut ctx, &event.sid, &event.key, &event.value),
        Operator::Update(u) => u.update(&mut ctx, &event.sid, &event.key, &event.value, slate),
    }));
    let failure = match outcome {
        Ok(Ok(())) => return Ok(ctx.finish()),
        Ok(Err(e)) => e.to_string(),
        Err(panic) => panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".to_string()),
    };
    Err(Error::Operator {
        function: def.name.clone(),
        message: failure,
    })
}

pub type MapCtor = Arc<dyn Fn(&FunctionDef) -> Result<Arc<dyn MapFunction>> + Send + Sync>;
pub type UpdateCtor = Arc<dyn Fn(&FunctionDef) -> Result<Arc<dyn UpdateFunction>> + Send + Sync>;

/// Named operator constructors. Each function in a workflow is constructed
/// exactly once per node from the entry named by its `implementation`.
#[derive(Clone, Default)]
pub struct Registry {
    maps: HashMap<String, MapCtor>,
    updates: HashMap<String, UpdateCtor>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_map<F>(&mut self, name: &str, ctor: F) -> &mut Self
    where
        F: Fn(&FunctionDef) -> Result<Arc<dyn MapFunction>> + Send + Sync + 'static,
    {
        self.maps.insert(name.to_string(), Arc::new(ctor));
        self
    }

    pub fn register_update<F>(&mut self, name: &str, ctor: F) -> &mut Self
    where
        F: Fn(&FunctionDef) -> Result<Arc<dyn UpdateFunction>> + Send + Sync + 'static,
    {
        self.updates.insert(name.to_string(), Arc::new(ctor));
        self
    }

    /// Registers a ready-made map instance under `name`.
    pub fn map_instance(&mut self, name: &str, f: impl MapFunction + 'static) -> &mut Self {
        let f: Arc<dyn MapFunction> = Arc::new(f);
        self.register_map(name, move |_| Ok(f.clone()))
    }

    /// Registers a ready-made update instance under `name`.
    pub fn update_instance(&mut self, name: &str, f: impl UpdateFunction + 'static) -> &mut Self {
        let f: Arc<dyn UpdateFunction> = Arc::new(f);
        self.register_update(name, move |_| Ok(f.clone()))
    }

    /// Builds one operator per function, in workflow order.
    pub fn instantiate(&self, workflow: &Workflow) -> Result<Vec<Operator>> {
        workflow
            .functions()
            .iter()
            .map(|def| {
                let missing = || Error::UnknownFunction(format!("{} (impl {})", def.name, def.implementation));
                Ok(match def.kind {
                    FunctionKind::Map => Operator::Map(self.maps.get(&def.implementation).ok_or_else(missing)?(def)?),
                    FunctionKind::Update => {
                        Operator::Update(self.updates.get(&def.implementation).ok_or_else(missing)?(def)?)
                    }
                })
            })
            .collect()
    }
}
