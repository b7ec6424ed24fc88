/* 64-bit atomic cells over a writable Python buffer.
 *
 * Each call holds the GIL for the duration of one hardware atomic, so the
 * operations are linearizable with respect to every Python thread and never
 * block on another thread.  spin_nogil() releases the GIL while it burns a
 * fixed number of nanoseconds; the ring benchmarks use it to stand in for a
 * DMA round trip issued by a separate processor.
 */
#define PY_SSIZE_T_CLEAN
#include <Python.h>
#include <stdint.h>
#include <time.h>

typedef struct {
    PyObject_HEAD
    Py_buffer view;
    char *base;
    Py_ssize_t len;
} CellsObject;

static int
check_off(CellsObject *self, PyObject *arg, Py_ssize_t *out)
{
    Py_ssize_t off = PyLong_AsSsize_t(arg);
    if (off == -1 && PyErr_Occurred())
        return -1;
    if (off < 0 || off % 8 != 0 || off + 8 > self->len) {
        PyErr_Format(PyExc_IndexError, "bad cell offset %zd", off);
        return -1;
    }
    *out = off;
    return 0;
}

static uint64_t *
cell(CellsObject *self, Py_ssize_t off)
{
    return (uint64_t *)(self->base + off);
}

static int
Cells_init(CellsObject *self, PyObject *args, PyObject *kwds)
{
    PyObject *obj;
    if (!PyArg_ParseTuple(args, "O", &obj))
        return -1;
    if (PyObject_GetBuffer(obj, &self->view, PyBUF_WRITABLE | PyBUF_C_CONTIGUOUS) < 0)
        return -1;
    self->base = (char *)self->view.buf;
    self->len = self->view.len;
    if (((uintptr_t)self->base) % 8 != 0) {
        PyBuffer_Release(&self->view);
        self->base = NULL;
        PyErr_SetString(PyExc_ValueError, "buffer is not 8-byte aligned");
        return -1;
    }
    return 0;
}

static void
Cells_dealloc(CellsObject *self)
{
    if (self->base != NULL)
        PyBuffer_Release(&self->view);
    Py_TYPE(self)->tp_free((PyObject *)self);
}

static PyObject *
Cells_load(CellsObject *self, PyObject *const *args, Py_ssize_t nargs)
{
    Py_ssize_t off;
    if (nargs != 1) {
        PyErr_SetString(PyExc_TypeError, "load(offset)");
        return NULL;
    }
    if (check_off(self, args[0], &off) < 0)
        return NULL;
    return PyLong_FromUnsignedLongLong(__atomic_load_n(cell(self, off), __ATOMIC_ACQUIRE));
}

static PyObject *
Cells_load_pair(CellsObject *self, PyObject *const *args, Py_ssize_t nargs)
{
    Py_ssize_t a, b;
    uint64_t va, vb;
    if (nargs != 2) {
        PyErr_SetString(PyExc_TypeError, "load_pair(first, second)");
        return NULL;
    }
    if (check_off(self, args[0], &a) < 0 || check_off(self, args[1], &b) < 0)
        return NULL;
    va = __atomic_load_n(cell(self, a), __ATOMIC_ACQUIRE);
    vb = __atomic_load_n(cell(self, b), __ATOMIC_ACQUIRE);
    return Py_BuildValue("(KK)", (unsigned long long)va, (unsigned long long)vb);
}

static PyObject *
Cells_store(CellsObject *self, PyObject *const *args, Py_ssize_t nargs)
{
    Py_ssize_t off;
    unsigned long long v;
    if (nargs != 2) {
        PyErr_SetString(PyExc_TypeError, "store(offset, value)");
        return NULL;
    }
    if (check_off(self, args[0], &off) < 0)
        return NULL;
    v = PyLong_AsUnsignedLongLong(args[1]);
    if (v == (unsigned long long)-1 && PyErr_Occurred())
        return NULL;
    __atomic_store_n(cell(self, off), (uint64_t)v, __ATOMIC_RELEASE);
    Py_RETURN_NONE;
}

static PyObject *
Cells_cas(CellsObject *self, PyObject *const *args, Py_ssize_t nargs)
{
    Py_ssize_t off;
    unsigned long long expected, desired;
    uint64_t exp;
    if (nargs != 3) {
        PyErr_SetString(PyExc_TypeError, "cas(offset, expected, desired)");
        return NULL;
    }
    if (check_off(self, args[0], &off) < 0)
        return NULL;
    expected = PyLong_AsUnsignedLongLong(args[1]);
    if (expected == (unsigned long long)-1 && PyErr_Occurred())
        return NULL;
    desired = PyLong_AsUnsignedLongLong(args[2]);
    if (desired == (unsigned long long)-1 && PyErr_Occurred())
        return NULL;
    exp = (uint64_t)expected;
    if (__atomic_compare_exchange_n(cell(self, off), &exp, (uint64_t)desired, 0,
                                    __ATOMIC_ACQ_REL, __ATOMIC_ACQUIRE))
        Py_RETURN_TRUE;
    Py_RETURN_FALSE;
}

static PyObject *
Cells_fetch_add(CellsObject *self, PyObject *const *args, Py_ssize_t nargs)
{
    Py_ssize_t off;
    unsigned long long delta;
    if (nargs != 2) {
        PyErr_SetString(PyExc_TypeError, "fetch_add(offset, delta)");
        return NULL;
    }
    if (check_off(self, args[0], &off) < 0)
        return NULL;
    delta = PyLong_AsUnsignedLongLong(args[1]);
    if (delta == (unsigned long long)-1 && PyErr_Occurred())
        return NULL;
    return PyLong_FromUnsignedLongLong(
        __atomic_fetch_add(cell(self, off), (uint64_t)delta, __ATOMIC_ACQ_REL));
}

static PyMethodDef Cells_methods[] = {
    {"load", (PyCFunction)(void (*)(void))Cells_load, METH_FASTCALL, "acquire load"},
    {"load_pair", (PyCFunction)(void (*)(void))Cells_load_pair, METH_FASTCALL,
     "two acquire loads, first argument read first"},
    {"store", (PyCFunction)(void (*)(void))Cells_store, METH_FASTCALL, "release store"},
    {"cas", (PyCFunction)(void (*)(void))Cells_cas, METH_FASTCALL, "compare and swap"},
    {"fetch_add", (PyCFunction)(void (*)(void))Cells_fetch_add, METH_FASTCALL,
     "atomic add, returns the previous value"},
    {NULL, NULL, 0, NULL},
};

static PyTypeObject CellsType = {
    PyVarObject_HEAD_INIT(NULL, 0)
    .tp_name = "dds_sim._atomics.Cells",
    .tp_basicsize = sizeof(CellsObject),
    .tp_flags = Py_TPFLAGS_DEFAULT,
    .tp_doc = "64-bit atomic cells over a writable buffer",
    .tp_new = PyType_GenericNew,
    .tp_init = (initproc)Cells_init,
    .tp_dealloc = (destructor)Cells_dealloc,
    .tp_methods = Cells_methods,
};

static PyObject *
spin_nogil(PyObject *mod, PyObject *arg)
{
    long long ns = PyLong_AsLongLong(arg);
    struct timespec start, now;
    if (ns == -1 && PyErr_Occurred())
        return NULL;
    if (ns <= 0)
        Py_RETURN_NONE;
    Py_BEGIN_ALLOW_THREADS
    clock_gettime(CLOCK_MONOTONIC, &start);
    for (;;) {
        clock_gettime(CLOCK_MONOTONIC, &now);
        if ((now.tv_sec - start.tv_sec) * 1000000000LL + (now.tv_nsec - start.tv_nsec) >= ns)
            break;
    }
    Py_END_ALLOW_THREADS
    Py_RETURN_NONE;
}

static PyMethodDef module_methods[] = {
    {"spin_nogil", spin_nogil, METH_O, "busy-wait ns nanoseconds without the GIL"},
    {NULL, NULL, 0, NULL},
};

static struct PyModuleDef atomics_module = {
    PyModuleDef_HEAD_INIT, "_atomics", NULL, -1, module_methods,
};

PyMODINIT_FUNC
PyInit__atomics(void)
{
    PyObject *m;
    if (PyType_Ready(&CellsType) < 0)
        return NULL;
    m = PyModule_Create(&atomics_module);
    if (m == NULL)
        return NULL;
    Py_INCREF(&CellsType);
    if (PyModule_AddObject(m, "Cells", (PyObject *)&CellsType) < 0) {
        Py_DECREF(&CellsType);
        Py_DECREF(m);
        return NULL;
    }
    return m;
}
