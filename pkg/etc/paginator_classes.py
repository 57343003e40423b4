from rest_framework.pagination import PageNumberPagination


class DefaultPagination(PageNumberPagination):
    """Fit run listings; detail payloads hold artifacts, so pages stay small"""
    page_size = 10
    page_size_query_param = 'page_size'
    max_page_size = 50
